use std::fmt;
use std::str::FromStr;

use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Geometric decay reaching `decay_floor · peak_lr` at `total_steps`.
    ExpDecay,
    /// Half cosine from `peak_lr` to 0 at `total_steps`.
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::ExpDecay => "exp-decay",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp-decay" => Ok(Schedule::ExpDecay),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub weight_decay: Scalar,
    pub clip_norm: Scalar,
    pub warmup_steps: u64,
    pub peak_lr: Scalar,
    pub schedule: Schedule,
    pub total_steps: u64,
    /// Fraction of `peak_lr` reached at the end of an exponential decay.
    pub decay_floor: Scalar,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_steps: 100,
            peak_lr: 3e-3,
            schedule: Schedule::ExpDecay,
            total_steps: 2000,
            decay_floor: 0.01,
        }
    }
}

impl OptimConfig {
    /// Fine-tuning settings: cosine from 1e-5 without warmup.
    pub fn sft() -> Self {
        OptimConfig {
            warmup_steps: 0,
            peak_lr: 1e-5,
            schedule: Schedule::Cosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: Scalar| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.peak_lr < 0.0 {
            return Err(Error::config("eps must be positive; weight_decay and peak_lr non-negative"));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({}) <= total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.decay_floor > 0.0 && self.decay_floor <= 1.0) {
            return Err(Error::config("decay_floor must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Settings for OptimConfig {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("clip_norm", self.clip_norm);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("peak_lr", self.peak_lr);
        kv.set("schedule", self.schedule);
        kv.set("total_steps", self.total_steps);
        kv.set("decay_floor", self.decay_floor);
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, v)?,
            "peak_lr" => self.peak_lr = parse_value(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "total_steps" => self.total_steps = parse_value(key, v)?,
            "decay_floor" => self.decay_floor = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown optim key `{other}`"))),
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0, then the configured decay.
/// Steps past `total_steps` are clamped.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> Scalar {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as Scalar / cfg.warmup_steps as Scalar;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.peak_lr;
    }
    let frac = (step - cfg.warmup_steps) as Scalar / span as Scalar;
    match cfg.schedule {
        Schedule::ExpDecay => cfg.peak_lr * cfg.decay_floor.powf(frac),
        Schedule::Cosine => {
            cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI as Scalar * frac).cos())
        }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimState {
            step: 0,
            first_moment: z.clone(),
            second_moment: z,
        }
    }
}

/// One AdamW update: decoupled decay `p -= lr·wd·p`, then the
/// bias-corrected Adam step. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: Scalar,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape(format!("parameter {i}: shape mismatch")));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: format!("parameter {i}"),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *pv -= lr * cfg.weight_decay * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient.
pub fn global_norm(grads: &[&Tensor]) -> Scalar {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<Scalar>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `threshold`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], threshold: Scalar) -> Result<Scalar> {
    if !(threshold > 0.0) {
        return Err(Error::config("clip threshold must be positive"));
    }
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> OptimState {
        OptimState::zeros_like(&[&Tensor::scalar(0.0)])
    }

    #[test]
    #[cfg_attr(feature = "f32", ignore = "f64 tolerance")]
    fn warmup_endpoints_and_decay_floor() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            total_steps: 110,
            peak_lr: 0.5,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 0.5);
        assert!((lr_at(110, &cfg) - 0.005).abs() < 1e-12);
        let c = OptimConfig {
            schedule: Schedule::Cosine,
            ..cfg
        };
        assert_eq!(lr_at(110, &c), 0.0);
        assert!((lr_at(60, &c) - 0.25).abs() < 1e-12);
    }

    #[test]
    #[cfg_attr(feature = "f32", ignore = "f64 tolerance")]
    fn exp_decay_is_geometric() {
        let cfg = OptimConfig {
            warmup_steps: 0,
            total_steps: 50,
            peak_lr: 1.0,
            ..OptimConfig::default()
        };
        let gamma = (0.01 as Scalar).powf(1.0 / 50.0);
        for s in 1..50 {
            assert!((lr_at(s, &cfg) / lr_at(s - 1, &cfg) - gamma).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut st = scalar_state();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-5);
        assert!((p.item().unwrap() - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_cases() {
        let g = Tensor::scalar(0.0);
        let mut p = Tensor::scalar(2.0);
        let mut st = scalar_state();
        let nowd = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        adamw_step(&mut [&mut p], &[&g], &mut st, &nowd, 0.1).unwrap();
        assert_eq!(p.item().unwrap(), 2.0);
        let mut st = scalar_state();
        adamw_step(&mut [&mut p], &[&g], &mut st, &OptimConfig::default(), 0.1).unwrap();
        assert_eq!(p.item().unwrap(), 2.0 * (1.0 - 0.1 * 0.1));
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = Tensor::scalar(1.0);
        let mut st = scalar_state();
        let err = adamw_step(
            &mut [&mut p],
            &[&Tensor::scalar(Scalar::NAN)],
            &mut st,
            &OptimConfig::default(),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!((p.item().unwrap(), st.step), (1.0, 0));
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::vector(&[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(&[0.3, 0.4])];
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn settings_round_trip() {
        let mut c = OptimConfig::default();
        c.set("schedule", "cosine").unwrap();
        c.set("peak_lr", "0.25").unwrap();
        let mut d = OptimConfig::default();
        d.apply(&c.to_kv()).unwrap();
        assert_eq!(c, d);
        assert!(d.set("bogus", "1").is_err());
    }
}
