//! Output-norm divergence monitor.
//!
//! Tracks an exponentially weighted moving average of `log rms` of the last
//! block's output and raises a flag when it keeps rising faster than a slope
//! threshold for a window of consecutive steps, or when anything non-finite
//! appears. Once raised, the flag stays raised.

use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorConfig {
    pub decay: Scalar,
    /// Per-step increase of the EWMA that counts as growth.
    pub slope_threshold: Scalar,
    /// Consecutive growing steps before flagging.
    pub window: usize,
    /// Steps before this one only seed the average: growth is not counted
    /// while the model leaves its initialisation. Non-finite values still
    /// flag.
    pub grace_steps: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            decay: 0.99,
            slope_threshold: 1e-3,
            window: 100,
            grace_steps: 0,
        }
    }
}

impl Settings for MonitorConfig {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("decay", self.decay);
        kv.set("slope_threshold", self.slope_threshold);
        kv.set("window", self.window);
        kv.set("grace_steps", self.grace_steps);
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "decay" => self.decay = parse_value(key, v)?,
            "slope_threshold" => self.slope_threshold = parse_value(key, v)?,
            "window" => self.window = parse_value(key, v)?,
            "grace_steps" => self.grace_steps = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown monitor key `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormRecord {
    pub step: u64,
    pub output_rms: Scalar,
    pub loss: Scalar,
    pub ewma_log_rms: Scalar,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormTrace {
    pub config: MonitorConfig,
    records: Vec<NormRecord>,
    ewma: Option<Scalar>,
    last_step: Option<u64>,
    streak: usize,
    diverged: bool,
}

impl NormTrace {
    pub fn new(config: MonitorConfig) -> Self {
        NormTrace {
            config,
            records: Vec::new(),
            ewma: None,
            last_step: None,
            streak: 0,
            diverged: false,
        }
    }

    pub fn records(&self) -> &[NormRecord] {
        &self.records
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// First step at which the flag was raised.
    pub fn first_flag(&self) -> Option<u64> {
        self.records.iter().find(|r| r.diverged).map(|r| r.step)
    }

    /// Feeds one rms observation. Returns the flag after this step.
    pub fn observe(&mut self, step: u64, rms: Scalar, loss: Scalar) -> Result<bool> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::Domain(format!(
                    "monitor steps must increase: {step} after {last}"
                )));
            }
        }
        let log_rms = rms.ln();
        let ewma = if !rms.is_finite() || !loss.is_finite() || rms <= 0.0 {
            self.diverged = true;
            self.ewma.unwrap_or(Scalar::NAN)
        } else if step < self.config.grace_steps {
            self.ewma = Some(log_rms);
            log_rms
        } else {
            let next = match self.ewma {
                None => log_rms,
                Some(prev) => self.config.decay * prev + (1.0 - self.config.decay) * log_rms,
            };
            if let Some(prev) = self.ewma {
                if next - prev > self.config.slope_threshold {
                    self.streak += 1;
                } else {
                    self.streak = 0;
                }
            }
            if self.streak >= self.config.window {
                self.diverged = true;
            }
            self.ewma = Some(next);
            next
        };
        self.last_step = Some(step);
        self.records.push(NormRecord {
            step,
            output_rms: rms,
            loss,
            ewma_log_rms: ewma,
            diverged: self.diverged,
        });
        Ok(self.diverged)
    }

    /// Running state, without the record history, for checkpoints.
    pub fn state_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        if let Some(e) = self.ewma {
            kv.set("ewma_bits", e.to_bits());
        }
        if let Some(s) = self.last_step {
            kv.set("last_step", s);
        }
        kv.set("streak", self.streak);
        kv.set("diverged", self.diverged);
        kv
    }

    pub fn restore_state(config: MonitorConfig, kv: &KeyValues) -> Result<Self> {
        let mut t = NormTrace::new(config);
        if kv.get("ewma_bits").is_some() {
            t.ewma = Some(Scalar::from_bits(kv.get_parsed("ewma_bits")?));
        }
        if kv.get("last_step").is_some() {
            t.last_step = Some(kv.get_parsed("last_step")?);
        }
        t.streak = kv.get_parsed("streak")?;
        t.diverged = kv.get_parsed("diverged")?;
        Ok(t)
    }
}

/// Records the rms of `last_layer_output` for `step`; returns the flag.
pub fn monitor_step(
    trace: &mut NormTrace,
    step: u64,
    last_layer_output: &Tensor,
    loss: Scalar,
) -> Result<bool> {
    let rms = if last_layer_output.all_finite() {
        last_layer_output.rms_all()
    } else {
        Scalar::NAN
    };
    trace.observe(step, rms, loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(stream: impl Iterator<Item = Scalar>) -> NormTrace {
        let mut t = NormTrace::new(MonitorConfig::default());
        for (i, r) in stream.enumerate() {
            t.observe(i as u64, r, 1.0).unwrap();
        }
        t
    }

    #[test]
    fn constant_stream_never_flags() {
        assert!(!run(std::iter::repeat(3.0).take(5000)).diverged());
    }

    #[test]
    fn geometric_growth_flags_within_200_steps() {
        for rate in [1.005, 1.01, 1.05] {
            let t = run((0..400).map(|i| (rate as Scalar).powi(i)));
            let at = t.first_flag().expect("flagged");
            assert!(at < 200, "rate {rate}: flagged at {at}");
        }
    }

    #[test]
    fn nan_flags_immediately() {
        let mut t = NormTrace::new(MonitorConfig::default());
        t.observe(0, 1.0, 1.0).unwrap();
        assert!(t.observe(1, Scalar::NAN, 1.0).unwrap());
        assert_eq!(t.first_flag(), Some(1));
        let mut t = NormTrace::new(MonitorConfig::default());
        assert!(monitor_step(&mut t, 0, &Tensor::vector(&[1.0, Scalar::INFINITY]), 1.0).unwrap());
    }

    #[test]
    fn growth_during_grace_is_not_counted() {
        let cfg = MonitorConfig {
            grace_steps: 150,
            ..MonitorConfig::default()
        };
        let mut t = NormTrace::new(cfg);
        for i in 0..400u64 {
            let r = if i < 150 { (1.05 as Scalar).powi(i as i32) } else { 1000.0 };
            t.observe(i, r, 1.0).unwrap();
        }
        assert!(!t.diverged());
        assert!(t.observe(400, Scalar::NAN, 1.0).unwrap());
    }

    #[test]
    fn steps_must_increase() {
        let mut t = NormTrace::new(MonitorConfig::default());
        t.observe(5, 1.0, 1.0).unwrap();
        assert!(t.observe(5, 1.0, 1.0).is_err());
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let stream: Vec<Scalar> = (0..300).map(|i| 1.0 + 0.01 * (i as Scalar).sin()).collect();
        let full = run(stream.iter().copied());
        let mut half = run(stream[..150].iter().copied());
        let mut resumed = NormTrace::restore_state(MonitorConfig::default(), &half.state_kv()).unwrap();
        for (i, &r) in stream.iter().enumerate().skip(150) {
            resumed.observe(i as u64, r, 1.0).unwrap();
            half.observe(i as u64, r, 1.0).unwrap();
        }
        assert_eq!(resumed.records(), &full.records()[150..]);
    }
}
