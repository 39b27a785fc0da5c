use rand::Rng;

use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Two-stage source weighting for pre-training.
///
/// Stage 1 covers steps `[0, floor(stage_boundary · total))`. In stage 2 every
/// stage-1 weight is halved and the stage-2 sources are added with their own
/// weights; each stage is normalised separately.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub stage1: Vec<(String, Scalar)>,
    pub stage2_extra: Vec<(String, Scalar)>,
    pub stage_boundary: Scalar,
}

impl Default for MixtureSpec {
    /// Stage-1 weights proportional to 2.9 : 1.5 : 0.4 (text-only,
    /// text-image, interleaved); stage 2 adds a curated source carrying as
    /// much weight as the halved stage-1 mass.
    fn default() -> Self {
        let total = 2.9 + 1.5 + 0.4;
        MixtureSpec {
            stage1: vec![
                ("text".into(), 2.9 / total),
                ("text-image".into(), 1.5 / total),
                ("interleaved".into(), 0.4 / total),
            ],
            stage2_extra: vec![("curated".into(), 0.5)],
            stage_boundary: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage1.is_empty() {
            return Err(Error::config("mixture needs at least one stage-1 source"));
        }
        for (name, w) in self.stage1.iter().chain(&self.stage2_extra) {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::config(format!("source `{name}` has non-positive weight {w}")));
            }
        }
        let mut names: Vec<&str> = self.stage1.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate stage-1 source"));
        }
        if !(self.stage_boundary > 0.0 && self.stage_boundary <= 1.0) {
            return Err(Error::config("stage_boundary must lie in (0, 1]"));
        }
        Ok(())
    }

    /// All source names: stage-1 sources first, then stage-2 additions not
    /// already listed.
    pub fn sources(&self) -> Vec<String> {
        let mut out: Vec<String> = self.stage1.iter().map(|(n, _)| n.clone()).collect();
        for (n, _) in &self.stage2_extra {
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
        out
    }

    /// First step of stage 2.
    pub fn boundary_step(&self, total_steps: u64) -> u64 {
        (self.stage_boundary * total_steps as Scalar).floor() as u64
    }

    pub fn stage_of(&self, step: u64, total_steps: u64) -> Stage {
        if step < self.boundary_step(total_steps) {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Normalised probabilities over [`MixtureSpec::sources`].
    pub fn probabilities(&self, stage: Stage) -> Vec<Scalar> {
        let names = self.sources();
        let mut w = vec![0.0; names.len()];
        let factor = match stage {
            Stage::One => 1.0,
            Stage::Two => 0.5,
        };
        for (n, x) in &self.stage1 {
            w[names.iter().position(|m| m == n).expect("listed")] += factor * x;
        }
        if stage == Stage::Two {
            for (n, x) in &self.stage2_extra {
                w[names.iter().position(|m| m == n).expect("listed")] += x;
            }
        }
        let total: Scalar = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }
}

/// Draws a source index (into [`MixtureSpec::sources`]) for `step`.
pub fn sample_source<R: Rng + ?Sized>(
    step: u64,
    total_steps: u64,
    spec: &MixtureSpec,
    rng: &mut R,
) -> Result<usize> {
    if step >= total_steps {
        return Err(Error::config(format!("step {step} is beyond total_steps {total_steps}")));
    }
    let probs = spec.probabilities(spec.stage_of(step, total_steps));
    let u: Scalar = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

impl Settings for MixtureSpec {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("stage_boundary", self.stage_boundary);
        for (n, w) in &self.stage1 {
            kv.set(format!("stage1.{n}"), w);
        }
        for (n, w) in &self.stage2_extra {
            kv.set(format!("stage2.{n}"), w);
        }
        kv
    }

    /// `stage_boundary`, `stage1.<source>` or `stage2.<source>`; setting a
    /// weight for a new source adds it.
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let upsert = |list: &mut Vec<(String, Scalar)>, name: &str, w: Scalar| {
            match list.iter_mut().find(|(n, _)| n == name) {
                Some(e) => e.1 = w,
                None => list.push((name.to_string(), w)),
            }
        };
        if key == "stage_boundary" {
            self.stage_boundary = parse_value(key, v)?;
        } else if let Some(n) = key.strip_prefix("stage1.") {
            upsert(&mut self.stage1, n, parse_value(key, v)?);
        } else if let Some(n) = key.strip_prefix("stage2.") {
            upsert(&mut self.stage2_extra, n, parse_value(key, v)?);
        } else {
            return Err(Error::config(format!("unknown mixture key `{key}`")));
        }
        Ok(())
    }

    fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }
}
