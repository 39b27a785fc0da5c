//! Transformer blocks with selectable norm placement, the full model, recipe
//! presets, checkpoints, and a key/value-cached inference path.

mod checkpoint;
mod config;
mod infer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{preset, ModelConfig, NormStrategy, PRESETS};
pub use infer::InferenceSession;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{self, AttentionTrace, Dropout, LayerParams, LayerVars};
use crate::numerics::{Graph, Scalar, Segment, Tensor, Var};
use crate::TokenId;

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `[vocab, d_model]`
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    /// `[d_model]`
    pub final_norm: Tensor,
    /// `[d_model, vocab]`; absent when embeddings are tied.
    pub output: Option<Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, v) = (cfg.d_model, cfg.vocab_size());
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
        let embed = Tensor::new(vec![v, d], (0..v * d).map(|_| normal.sample(rng)).collect())?;
        let out_scale = 1.0 / ((2 * cfg.n_layers) as Scalar).sqrt();
        let attn = cfg.attention();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::init(&attn, cfg.d_ff, cfg.init_std, out_scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = if cfg.tie_embeddings {
            None
        } else {
            Some(Tensor::new(
                vec![d, v],
                (0..v * d).map(|_| normal.sample(rng)).collect(),
            )?)
        };
        Ok(ModelParams {
            embed,
            layers,
            final_norm: Tensor::ones(vec![d]),
            output,
        })
    }

    /// `(name, tensor)` pairs in a fixed order shared by the optimizer and
    /// checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        v.push(("final_norm".to_string(), &self.final_norm));
        if let Some(o) = &self.output {
            v.push(("output".to_string(), o));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(
                l.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        v.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(o) = &mut self.output {
            v.push(("output".to_string(), o));
        }
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let embed = g.param(self.embed.clone());
        let layers = self.layers.iter().map(|l| l.bind(g)).collect();
        let final_norm = g.param(self.final_norm.clone());
        let output = self.output.as_ref().map(|o| g.param(o.clone()));
        ModelVars {
            embed,
            layers,
            final_norm,
            output,
        }
    }
}

/// [`ModelParams`] bound into a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub output: Option<Var>,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for l in &self.layers {
            v.extend(l.vars());
        }
        v.push(self.final_norm);
        v.extend(self.output);
        v
    }
}

/// Per-call switches of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub train: bool,
    /// Replaces every normalization layer by the identity. Test hook for
    /// comparing residual wiring across norm strategies.
    pub identity_norms: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            identity_norms: false,
        }
    }
}

/// Nodes produced by one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// Residual stream after the attention sublayer.
    pub mid: Var,
    /// What the attention sublayer adds to the residual stream.
    pub attn_increment: Var,
    /// What the feed-forward sublayer adds to the residual stream.
    pub ffn_increment: Var,
    pub attention: AttentionTrace,
}

fn maybe_norm(g: &mut Graph, x: Var, gain: Var, eps: Scalar, identity: bool) -> Result<Var> {
    if identity {
        Ok(x)
    } else {
        layers::rms_norm(g, x, gain, eps)
    }
}

/// One transformer block on `x: [rows, d_model]`.
///
/// Dropout, when active, is applied to each sublayer's output before the
/// residual add (for post-norm placement, before the norm).
pub fn block_forward<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: &LayerVars,
    cfg: &ModelConfig,
    segments: &[Segment],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<BlockTrace> {
    let shape = g.value(x).shape();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::shape(format!(
            "block input must be [rows, {}], got {shape:?}",
            cfg.d_model
        )));
    }
    let attn_cfg = cfg.attention();
    let id = opts.identity_norms;
    let mut drop = Dropout {
        p: cfg.dropout_p,
        train: opts.train,
        rng,
    };
    let (attention, attn_increment) = match cfg.norm_strategy {
        NormStrategy::PreNorm => {
            let xn = maybe_norm(g, x, p.attn_norm, cfg.eps, id)?;
            let a = layers::causal_gqa_attention(g, xn, p, &attn_cfg, segments, &mut drop)?;
            (a, a.output)
        }
        NormStrategy::PostNormReorder => {
            let a = layers::causal_gqa_attention(g, x, p, &attn_cfg, segments, &mut drop)?;
            let inc = maybe_norm(g, a.output, p.attn_norm, cfg.eps, id)?;
            (a, inc)
        }
    };
    let mid = g.add(x, attn_increment)?;
    let ffn_increment = match cfg.norm_strategy {
        NormStrategy::PreNorm => {
            let hn = maybe_norm(g, mid, p.ffn_norm, cfg.eps, id)?;
            let f = layers::swiglu_ffn(g, hn, p.w1, p.w2, p.w3)?;
            layers::dropout(g, f, cfg.dropout_p, opts.train, drop.rng)?
        }
        NormStrategy::PostNormReorder => {
            let f = layers::swiglu_ffn(g, mid, p.w1, p.w2, p.w3)?;
            let f = layers::dropout(g, f, cfg.dropout_p, opts.train, drop.rng)?;
            maybe_norm(g, f, p.ffn_norm, cfg.eps, id)?
        }
    };
    let output = g.add(mid, ffn_increment)?;
    Ok(BlockTrace {
        output,
        mid,
        attn_increment,
        ffn_increment,
        attention,
    })
}

/// Nodes produced by [`forward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[rows, vocab]`
    pub logits: Var,
    /// Output of the last block, before the final norm, `[rows, d_model]`.
    pub last_layer_output: Var,
    pub blocks: Vec<BlockTrace>,
    pub segments: Vec<Segment>,
}

/// Forward pass over several sequences laid end to end; each attends only
/// within itself.
pub fn forward_batch<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    sequences: &[&[TokenId]],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let vocab = cfg.vocab_size();
    let mut ids = Vec::new();
    for seq in sequences {
        if seq.len() > cfg.context_length {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context: cfg.context_length,
            });
        }
        for &t in *seq {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, size: vocab });
            }
            ids.push(t as usize);
        }
    }
    if ids.is_empty() {
        return Err(Error::Empty("forward pass over no tokens".into()));
    }
    let segments = Segment::packed(&sequences.iter().map(|s| s.len()).collect::<Vec<_>>());
    let segments: Vec<Segment> = segments.into_iter().filter(|s| s.len > 0).collect();
    let mut x = g.embedding(vars.embed, &ids)?;
    let mut blocks = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        let b = block_forward(g, x, lv, cfg, &segments, opts, rng)?;
        x = b.output;
        blocks.push(b);
    }
    let last_layer_output = x;
    let xn = maybe_norm(g, x, vars.final_norm, cfg.eps, opts.identity_norms)?;
    let out_w = match vars.output {
        Some(o) => o,
        None => g.transpose(vars.embed)?,
    };
    let logits = g.matmul(xn, out_w)?;
    Ok(ForwardTrace {
        logits,
        last_layer_output,
        blocks,
        segments,
    })
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Transformer {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Transformer { config, params })
    }

    /// Evaluation-mode forward pass of one sequence, returning
    /// `(logits [seq, vocab], last-layer output [seq, d_model])`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = forward_batch(
            &mut g,
            &vars,
            &self.config,
            &[tokens],
            ForwardOptions::eval(),
            &mut rng,
        )?;
        Ok((
            g.value(t.logits).clone(),
            g.value(t.last_layer_output).clone(),
        ))
    }

    pub fn session(&self) -> InferenceSession<'_> {
        InferenceSession::new(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(strategy: NormStrategy) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 24,
            context_length: 16,
            text_vocab: 20,
            codebook_size: 8,
            norm_strategy: strategy,
            dropout_p: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn logits_shape_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Transformer::new(small(NormStrategy::PreNorm), &mut rng).unwrap();
        let (logits, last) = m.forward(&[1, 2, 3, 25]).unwrap();
        assert_eq!(logits.shape(), &[4, m.config.vocab_size()]);
        assert_eq!(last.shape(), &[4, 16]);
        assert!(matches!(
            m.forward(&[1, 999]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward(&[1; 17]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn zero_output_projections_make_prenorm_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small(NormStrategy::PreNorm);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        for l in &mut params.layers {
            l.wo = Tensor::zeros(l.wo.shape().to_vec());
            l.w2 = Tensor::zeros(l.w2.shape().to_vec());
        }
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let x = g.constant(Tensor::new(vec![3, 16], (0..48).map(|i| (i as Scalar).sin()).collect()).unwrap());
        let segs = [Segment { start: 0, len: 3 }];
        let b = block_forward(&mut g, x, &vars.layers[0], &cfg, &segs, ForwardOptions::eval(), &mut rng).unwrap();
        assert_eq!(g.value(b.output).data(), g.value(x).data());
    }

    #[test]
    fn tied_embeddings_drop_output_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..small(NormStrategy::PreNorm)
        };
        let m = Transformer::new(cfg, &mut rng).unwrap();
        assert!(m.params.output.is_none());
        let (logits, _) = m.forward(&[0, 1]).unwrap();
        assert_eq!(logits.shape()[1], m.config.vocab_size());
    }
}
