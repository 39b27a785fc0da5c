use std::fmt;
use std::str::FromStr;

use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::layers::AttentionConfig;
use crate::numerics::Scalar;
use crate::tokenizer::{MixedVocab, SPECIAL_COUNT};

/// Where the residual-branch normalization sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStrategy {
    /// `h = x + attn(norm(x))`, `out = h + ffn(norm(h))`.
    PreNorm,
    /// `h = x + norm(attn(x))`, `out = h + norm(ffn(h))`.
    PostNormReorder,
}

impl fmt::Display for NormStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormStrategy::PreNorm => "pre-norm",
            NormStrategy::PostNormReorder => "post-norm-reorder",
        })
    }
}

impl FromStr for NormStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-norm" => Ok(NormStrategy::PreNorm),
            "post-norm-reorder" => Ok(NormStrategy::PostNormReorder),
            other => Err(Error::config(format!("unknown norm strategy `{other}`"))),
        }
    }
}

/// Architecture and regularization settings of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    /// Size of the text id range `[0, T)`.
    pub text_vocab: usize,
    /// Size of the image codebook id range `[T, T + C)`.
    pub codebook_size: usize,
    pub norm_strategy: NormStrategy,
    pub use_qk_norm: bool,
    pub qk_norm_after_rope: bool,
    pub dropout_p: Scalar,
    pub z_loss_coeff: Scalar,
    pub rope_base: Scalar,
    pub eps: Scalar,
    pub tie_embeddings: bool,
    pub init_std: Scalar,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 128,
            context_length: 128,
            text_vocab: 512,
            codebook_size: 256,
            norm_strategy: NormStrategy::PreNorm,
            use_qk_norm: true,
            qk_norm_after_rope: false,
            dropout_p: 0.0,
            z_loss_coeff: 1e-5,
            rope_base: 10000.0,
            eps: 1e-5,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 4] = ["7b-recipe", "34b-recipe", "llama2-recipe", "toy"];

/// Toy-scale dimensions with the switch settings of a published recipe.
///
/// | preset          | QK-Norm | dropout | z-loss | norm placement    | GQA |
/// |-----------------|---------|---------|--------|-------------------|-----|
/// | `7b-recipe`     | on      | 0.1     | 1e-5   | pre-norm          | no  |
/// | `34b-recipe`    | on      | 0.0     | 1e-5   | post-norm-reorder | yes |
/// | `llama2-recipe` | off     | 0.0     | 0      | pre-norm          | no  |
/// | `toy`           | on      | 0.0     | 1e-5   | pre-norm          | yes |
///
/// The full-scale runs behind the first three used 4k-token contexts and
/// batches of 2²³ (7B) or 3·2²² (34B) tokens; the toy dimensions here keep
/// only the switches.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let base = ModelConfig::default();
    Ok(match name {
        "7b-recipe" => ModelConfig {
            dropout_p: 0.1,
            ..base
        },
        "34b-recipe" => ModelConfig {
            n_kv_heads: 2,
            norm_strategy: NormStrategy::PostNormReorder,
            ..base
        },
        "llama2-recipe" => ModelConfig {
            use_qk_norm: false,
            z_loss_coeff: 0.0,
            ..base
        },
        "toy" => ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            context_length: 64,
            ..base
        },
        other => {
            return Err(Error::config(format!(
                "unknown preset `{other}`; expected one of {PRESETS:?}"
            )))
        }
    })
}

impl ModelConfig {
    /// This configuration's dimensions with the stability switches of
    /// `recipe`: norm placement, QK-Norm, dropout, z-loss, and whether keys
    /// and values are grouped (half as many kv heads).
    pub fn with_switches_of(&self, recipe: &ModelConfig) -> ModelConfig {
        let grouped = recipe.n_kv_heads < recipe.n_heads;
        let n_kv_heads = if grouped && self.n_heads % 2 == 0 {
            self.n_heads / 2
        } else if grouped {
            self.n_kv_heads
        } else {
            self.n_heads
        };
        ModelConfig {
            norm_strategy: recipe.norm_strategy,
            use_qk_norm: recipe.use_qk_norm,
            qk_norm_after_rope: recipe.qk_norm_after_rope,
            dropout_p: recipe.dropout_p,
            z_loss_coeff: recipe.z_loss_coeff,
            n_kv_heads,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn vocab(&self) -> MixedVocab {
        MixedVocab::new(self.text_vocab, self.codebook_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.text_vocab + self.codebook_size + SPECIAL_COUNT
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            context_length: self.context_length,
            use_qk_norm: self.use_qk_norm,
            qk_norm_after_rope: self.qk_norm_after_rope,
            rope_base: self.rope_base,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.context_length == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        self.attention().validate()?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        if self.z_loss_coeff < 0.0 {
            return Err(Error::config("z_loss_coeff must be non-negative"));
        }
        if self.eps < 0.0 || self.rope_base <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::config("eps, rope_base and init_std must be positive"));
        }
        if self.text_vocab == 0 || self.codebook_size < 2 {
            return Err(Error::config("need a non-empty text range and at least 2 codebook entries"));
        }
        Ok(())
    }
}

impl Settings for ModelConfig {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("d_model", self.d_model);
        kv.set("n_layers", self.n_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("n_kv_heads", self.n_kv_heads);
        kv.set("d_ff", self.d_ff);
        kv.set("context_length", self.context_length);
        kv.set("text_vocab", self.text_vocab);
        kv.set("codebook_size", self.codebook_size);
        kv.set("norm_strategy", self.norm_strategy);
        kv.set("use_qk_norm", self.use_qk_norm);
        kv.set("qk_norm_after_rope", self.qk_norm_after_rope);
        kv.set("dropout_p", self.dropout_p);
        kv.set("z_loss_coeff", self.z_loss_coeff);
        kv.set("rope_base", self.rope_base);
        kv.set("eps", self.eps);
        kv.set("tie_embeddings", self.tie_embeddings);
        kv.set("init_std", self.init_std);
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse_value(key, v)?,
            "n_layers" => self.n_layers = parse_value(key, v)?,
            "n_heads" => self.n_heads = parse_value(key, v)?,
            "n_kv_heads" => self.n_kv_heads = parse_value(key, v)?,
            "d_ff" => self.d_ff = parse_value(key, v)?,
            "context_length" => self.context_length = parse_value(key, v)?,
            "text_vocab" => self.text_vocab = parse_value(key, v)?,
            "codebook_size" => self.codebook_size = parse_value(key, v)?,
            "norm_strategy" => self.norm_strategy = v.parse()?,
            "use_qk_norm" => self.use_qk_norm = parse_value(key, v)?,
            "qk_norm_after_rope" => self.qk_norm_after_rope = parse_value(key, v)?,
            "dropout_p" => self.dropout_p = parse_value(key, v)?,
            "z_loss_coeff" => self.z_loss_coeff = parse_value(key, v)?,
            "rope_base" => self.rope_base = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "tie_embeddings" => self.tie_embeddings = parse_value(key, v)?,
            "init_std" => self.init_std = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_switches() {
        let p34 = preset("34b-recipe").unwrap();
        assert_eq!(p34.dropout_p, 0.0);
        assert!(p34.use_qk_norm);
        assert_eq!(p34.norm_strategy, NormStrategy::PostNormReorder);
        assert!(p34.n_kv_heads < p34.n_heads);

        let p7 = preset("7b-recipe").unwrap();
        assert_eq!(p7.z_loss_coeff, 1e-5);
        assert_eq!(p7.dropout_p, 0.1);
        assert_eq!(p7.n_kv_heads, p7.n_heads);
        assert_eq!(p7.norm_strategy, NormStrategy::PreNorm);

        let l2 = preset("llama2-recipe").unwrap();
        assert!(!l2.use_qk_norm);
        assert_eq!(l2.z_loss_coeff, 0.0);
        assert_eq!(l2.dropout_p, 0.0);

        let toy = preset("toy").unwrap();
        let mixed = toy.with_switches_of(&l2);
        assert_eq!(mixed.d_model, toy.d_model);
        assert!(!mixed.use_qk_norm);
        assert_eq!(mixed.n_kv_heads, mixed.n_heads);
        assert_eq!(toy.with_switches_of(&p34).n_kv_heads, 2);

        assert!(preset("70b").is_err());
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = preset("34b-recipe").unwrap();
        let mut back = ModelConfig::default();
        back.apply(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
    }

    #[test]
    fn validation_catches_bad_heads() {
        let cfg = ModelConfig {
            n_kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            dropout_p: 1.0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
