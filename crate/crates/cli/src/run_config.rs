//! The flat run configuration: defaults, then a preset, then a config file,
//! then `--set` overrides. Keys are dotted paths into the library configs.

use std::path::Path;

use chamtoy::config::{parse_value, KeyValues, Settings};
use chamtoy::data::{MixtureSpec, TokenizerSpec};
use chamtoy::decoder::DecodePolicy;
use chamtoy::model::{preset, ModelConfig};
use chamtoy::trainer::{OptimConfig, TrainConfig};
use chamtoy::Error;

pub const SEED_ENV: &str = "CHAMTOY_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mixture: MixtureSpec,
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokenizer: TokenizerSpec,
    pub decode: DecodePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mixture: MixtureSpec::default(),
            batch_size: 8,
            seq_len: 48,
            tokenizer: TokenizerSpec::default(),
            decode: DecodePolicy::default(),
        }
    }
}

impl RunConfig {
    /// Model switches of `preset_name`. `toy` shrinks the model to the toy
    /// dimensions and shortens the run.
    pub fn for_preset(preset_name: &str, toy: bool) -> chamtoy::Result<Self> {
        let mut c = RunConfig {
            model: preset(preset_name)?,
            ..RunConfig::default()
        };
        if toy {
            c.model = preset("toy")?.with_switches_of(&c.model);
            c.train.optim.total_steps = 300;
            c.train.optim.warmup_steps = 30;
            c.train.monitor.grace_steps = 100;
            c.train.checkpoint_every = 100;
        }
        Ok(c)
    }

    /// Fine-tuning defaults on top of a pre-trained model.
    pub fn for_sft(model: ModelConfig, toy: bool) -> Self {
        let mut c = RunConfig {
            model: ModelConfig {
                dropout_p: 0.05,
                ..model
            },
            ..RunConfig::default()
        };
        c.train.optim = OptimConfig {
            total_steps: if toy { 100 } else { 500 },
            ..OptimConfig::sft()
        };
        c
    }

    /// Layers `CHAMTOY_SEED`, the config file, `--set` pairs and an
    /// explicit seed, in that order.
    pub fn layer(
        &mut self,
        env_seed: Option<&str>,
        file: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
    ) -> chamtoy::Result<KeyValues> {
        let mut explicit = KeyValues::new();
        if let Some(s) = env_seed {
            self.set("seed", s)?;
        }
        if let Some(f) = file {
            let kv = KeyValues::read(f)?;
            self.apply(&kv)?;
            for (k, v) in kv.iter() {
                explicit.set(k, v);
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            self.set(k.trim(), v.trim())?;
            explicit.set(k.trim(), v.trim());
        }
        if let Some(s) = seed {
            self.train.seed = s;
            explicit.set("seed", s);
        }
        Ok(explicit)
    }

    pub fn validate(&self) -> chamtoy::Result<()> {
        self.model.validate()?;
        self.train.optim.validate()?;
        self.mixture.validate()?;
        self.decode.validate()?;
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("data.batch_size must be positive and data.seq_len at least 2".into()));
        }
        if self.seq_len > self.model.context_length {
            return Err(Error::Config(format!(
                "data.seq_len {} exceeds model.context_length {}",
                self.seq_len, self.model.context_length
            )));
        }
        Ok(())
    }
}

impl Settings for RunConfig {
    fn to_kv(&self) -> KeyValues {
        let mut kv = self.train.to_kv();
        kv.extend_prefixed("model", &self.model.to_kv());
        kv.extend_prefixed("mixture", &self.mixture.to_kv());
        kv.set("data.batch_size", self.batch_size);
        kv.set("data.seq_len", self.seq_len);
        kv.extend_prefixed("tokenizer", &self.tokenizer.to_kv());
        kv.extend_prefixed("decode", &self.decode.to_kv());
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> chamtoy::Result<()> {
        let (head, rest) = key.split_once('.').unwrap_or((key, ""));
        match head {
            "model" => self.model.set(rest, v),
            "mixture" => self.mixture.set(rest, v),
            "tokenizer" => self.tokenizer.set(rest, v),
            "decode" => self.decode.set(rest, v),
            "data" => {
                match rest {
                    "batch_size" => self.batch_size = parse_value(key, v)?,
                    "seq_len" => self.seq_len = parse_value(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }
            _ => self.train.set(key, v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chamtoy::model::NormStrategy;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::for_preset("34b-recipe", true).unwrap();
        c.layer(None, None, &["optim.peak_lr=0.01".into(), "decode.sampling=greedy".into()], Some(5))
            .unwrap();
        let mut back = RunConfig::default();
        back.apply(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model.norm_strategy, NormStrategy::PostNormReorder);
        assert_eq!(c.model.dropout_p, 0.0);
        assert!(c.model.use_qk_norm);
    }

    #[test]
    fn precedence_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.layer(Some("3"), None, &["seed=4".into()], None).unwrap();
        assert_eq!(c.train.seed, 4);
        c.layer(Some("3"), None, &[], Some(9)).unwrap();
        assert_eq!(c.train.seed, 9);
        assert!(c.layer(None, None, &["model.widht=3".into()], None).is_err());
        assert!(c.layer(None, None, &["nonsense".into()], None).is_err());
    }
}
