//! The transformer layer vocabulary: RMSNorm, SwiGLU, rotary embeddings,
//! grouped-query causal attention with optional QK-Norm, and dropout.
//!
//! Each function appends its operations to a [`Graph`] and returns the output
//! node, so gradients come from one [`Graph::backward`] call on the loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Segment, Tensor, Var};

/// Geometry and switches of one attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub context_length: usize,
    pub use_qk_norm: bool,
    pub qk_norm_after_rope: bool,
    pub rope_base: Scalar,
    pub eps: Scalar,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("head_dim must be even for rotary embeddings"));
        }
        Ok(())
    }
}

/// Learnable tensors of one transformer block. Projections are stored
/// `[in, out]` and applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    /// `[n_heads, head_dim]`, present when QK-Norm is on.
    pub q_norm: Option<Tensor>,
    /// `[n_kv_heads, head_dim]`, present when QK-Norm is on.
    pub k_norm: Option<Tensor>,
}

impl LayerParams {
    /// Normal(0, std) projections; output projections scaled by `out_scale`;
    /// unit norm gains.
    pub fn init(
        cfg: &AttentionConfig,
        d_ff: usize,
        std: Scalar,
        out_scale: Scalar,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let mut mat = |rows: usize, cols: usize, scale: Scalar| {
            let data = (0..rows * cols).map(|_| normal.sample(rng) * scale).collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        Ok(LayerParams {
            wq: mat(d, cfg.n_heads * hd, 1.0),
            wk: mat(d, cfg.n_kv_heads * hd, 1.0),
            wv: mat(d, cfg.n_kv_heads * hd, 1.0),
            wo: mat(cfg.n_heads * hd, d, out_scale),
            w1: mat(d, d_ff, 1.0),
            w2: mat(d_ff, d, out_scale),
            w3: mat(d, d_ff, 1.0),
            attn_norm: Tensor::ones(vec![d]),
            ffn_norm: Tensor::ones(vec![d]),
            q_norm: cfg.use_qk_norm.then(|| Tensor::ones(vec![cfg.n_heads, hd])),
            k_norm: cfg.use_qk_norm.then(|| Tensor::ones(vec![cfg.n_kv_heads, hd])),
        })
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("w3", &self.w3),
            ("attn_norm", &self.attn_norm),
            ("ffn_norm", &self.ffn_norm),
        ];
        if let Some(q) = &self.q_norm {
            v.push(("q_norm", q));
        }
        if let Some(k) = &self.k_norm {
            v.push(("k_norm", k));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
            ("w3", &mut self.w3),
            ("attn_norm", &mut self.attn_norm),
            ("ffn_norm", &mut self.ffn_norm),
        ];
        if let Some(q) = &mut self.q_norm {
            v.push(("q_norm", q));
        }
        if let Some(k) = &mut self.k_norm {
            v.push(("k_norm", k));
        }
        v
    }

    /// Loads every tensor into `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> LayerVars {
        LayerVars {
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            w1: g.param(self.w1.clone()),
            w2: g.param(self.w2.clone()),
            w3: g.param(self.w3.clone()),
            attn_norm: g.param(self.attn_norm.clone()),
            ffn_norm: g.param(self.ffn_norm.clone()),
            q_norm: self.q_norm.as_ref().map(|t| g.param(t.clone())),
            k_norm: self.k_norm.as_ref().map(|t| g.param(t.clone())),
        }
    }
}

/// [`LayerParams`] bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub attn_norm: Var,
    pub ffn_norm: Var,
    pub q_norm: Option<Var>,
    pub k_norm: Option<Var>,
}

impl LayerVars {
    /// Same order as [`LayerParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.w2,
            self.w3,
            self.attn_norm,
            self.ffn_norm,
        ];
        v.extend(self.q_norm);
        v.extend(self.k_norm);
        v
    }
}

/// Dropout settings for one forward pass.
pub struct Dropout<'r, R: Rng> {
    pub p: Scalar,
    pub train: bool,
    pub rng: &'r mut R,
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
pub fn rms_norm(g: &mut Graph, x: Var, gain: Var, eps: Scalar) -> Result<Var> {
    if eps < 0.0 {
        return Err(Error::config("eps must be non-negative"));
    }
    g.rms_norm(x, gain, eps)
}

/// `W2 · (silu(x·W1) ⊙ (x·W3))`.
pub fn swiglu_ffn(g: &mut Graph, x: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let gate = g.matmul(x, w1)?;
    let gate = g.silu(gate);
    let up = g.matmul(x, w3)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w2)
}

/// Rotary embedding of `x: [rows, heads, head_dim]`.
pub fn rope(g: &mut Graph, x: Var, positions: &[usize], base: Scalar) -> Result<Var> {
    g.rope(x, positions, base)
}

/// Bias-free layer norm applied independently to every query and key vector;
/// gains are per head over `head_dim`.
pub fn qk_norm(
    g: &mut Graph,
    q: Var,
    k: Var,
    q_gain: Var,
    k_gain: Var,
    eps: Scalar,
) -> Result<(Var, Var)> {
    let q = g.layer_norm(q, q_gain, eps)?;
    let k = g.layer_norm(k, k_gain, eps)?;
    Ok((q, k))
}

/// Inverted dropout: in training each element survives with probability
/// `1 − p` and is scaled by `1/(1 − p)`; in evaluation it is the identity.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, p: Scalar, train: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<Scalar>() < p { 0.0 } else { keep })
        .collect();
    g.mask_mul(x, mask)
}

/// Attention nodes exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// The attention node; see [`Graph::attention_probs`].
    pub attention: Var,
    /// Query and key vectors entering the dot product, `[rows, heads, head_dim]`.
    pub q: Var,
    pub k: Var,
}

/// Causal grouped-query attention over `x: [rows, d_model]`.
///
/// `segments` tiles the rows into independent sequences; positions restart
/// at zero in each. When QK-Norm is on it runs after the projections and,
/// unless `qk_norm_after_rope` is set, before the rotary embedding.
pub fn causal_gqa_attention<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: &LayerVars,
    cfg: &AttentionConfig,
    segments: &[Segment],
    dropout_cfg: &mut Dropout<'_, R>,
) -> Result<AttentionTrace> {
    cfg.validate()?;
    let rows = g.value(x).shape()[0];
    for s in segments {
        if s.len > cfg.context_length {
            return Err(Error::ContextOverflow {
                len: s.len,
                context: cfg.context_length,
            });
        }
    }
    let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
    if positions.len() != rows {
        return Err(Error::shape("segments do not cover the input rows"));
    }
    let hd = cfg.head_dim();
    let q = g.matmul(x, p.wq)?;
    let q = g.reshape(q, vec![rows, cfg.n_heads, hd])?;
    let k = g.matmul(x, p.wk)?;
    let k = g.reshape(k, vec![rows, cfg.n_kv_heads, hd])?;
    let v = g.matmul(x, p.wv)?;
    let v = g.reshape(v, vec![rows, cfg.n_kv_heads, hd])?;

    let norm = |g: &mut Graph, q: Var, k: Var| -> Result<(Var, Var)> {
        match (cfg.use_qk_norm, p.q_norm, p.k_norm) {
            (false, _, _) => Ok((q, k)),
            (true, Some(qg), Some(kg)) => qk_norm(g, q, k, qg, kg, cfg.eps),
            _ => Err(Error::config("QK-Norm enabled but its gains are missing")),
        }
    };
    let (q, k) = if cfg.qk_norm_after_rope {
        let q = rope(g, q, &positions, cfg.rope_base)?;
        let k = rope(g, k, &positions, cfg.rope_base)?;
        norm(g, q, k)?
    } else {
        let (q, k) = norm(g, q, k)?;
        (
            rope(g, q, &positions, cfg.rope_base)?,
            rope(g, k, &positions, cfg.rope_base)?,
        )
    };
    let attn = g.causal_attention(q, k, v, segments)?;
    let merged = g.reshape(attn, vec![rows, cfg.n_heads * hd])?;
    let out = g.matmul(merged, p.wo)?;
    let out = dropout(g, out, dropout_cfg.p, dropout_cfg.train, dropout_cfg.rng)?;
    Ok(AttentionTrace {
        output: out,
        attention: attn,
        q,
        k,
    })
}
