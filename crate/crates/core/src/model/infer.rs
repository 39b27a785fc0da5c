use super::{NormStrategy, Transformer};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::numerics::{kernels, Scalar};
use crate::TokenId;

#[derive(Clone, Debug, Default)]
struct LayerCache {
    /// `[pos, kv_heads, head_dim]`, keys after QK-Norm and rotation.
    keys: Vec<Scalar>,
    values: Vec<Scalar>,
}

/// Incremental decoding over a frozen model, one token at a time, with a
/// key/value cache per layer. Works without a graph.
#[derive(Clone, Debug)]
pub struct InferenceSession<'m> {
    model: &'m Transformer,
    caches: Vec<LayerCache>,
    freqs: Vec<Scalar>,
    pos: usize,
    last_hidden: Vec<Scalar>,
}

fn vec_mat(x: &[Scalar], w: &[Scalar], cols: usize) -> Vec<Scalar> {
    kernels::matmul(x, w, 1, x.len(), cols)
}

fn rms_norm(x: &[Scalar], gain: &[Scalar], eps: Scalar) -> Vec<Scalar> {
    let mut y = vec![0.0; x.len()];
    kernels::rms_norm_row(x, gain, eps, &mut y);
    y
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Transformer) -> Self {
        let cfg = &model.config;
        InferenceSession {
            model,
            caches: vec![LayerCache::default(); cfg.n_layers],
            freqs: kernels::rope_frequencies(cfg.head_dim(), cfg.rope_base),
            pos: 0,
            last_hidden: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m Transformer {
        self.model
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn reset(&mut self) {
        for c in &mut self.caches {
            c.keys.clear();
            c.values.clear();
        }
        self.pos = 0;
        self.last_hidden.clear();
    }

    /// Output of the last block for the most recent token, before the final norm.
    pub fn last_hidden(&self) -> &[Scalar] {
        &self.last_hidden
    }

    /// Consumes one token and returns the next-token logits.
    pub fn feed(&mut self, token: TokenId) -> Result<Vec<Scalar>> {
        let model = self.model;
        let cfg = &model.config;
        let vocab = cfg.vocab_size();
        if token as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: token, size: vocab });
        }
        if self.pos >= cfg.context_length {
            return Err(Error::ContextOverflow {
                len: self.pos + 1,
                context: cfg.context_length,
            });
        }
        let p = &model.params;
        let mut x = p.embed.row(token as usize).to_vec();
        for (layer, cache) in p.layers.iter().zip(self.caches.iter_mut()) {
            x = block_step(layer, cache, &x, self.pos, &self.freqs, model)?;
        }
        self.last_hidden = x.clone();
        let xn = rms_norm(&x, p.final_norm.data(), cfg.eps);
        let logits = match &p.output {
            Some(o) => vec_mat(&xn, o.data(), vocab),
            None => kernels::matmul_nt(&xn, p.embed.data(), 1, cfg.d_model, vocab),
        };
        self.pos += 1;
        Ok(logits)
    }

    /// Feeds every token and returns the logits after the last one.
    pub fn feed_all(&mut self, tokens: &[TokenId]) -> Result<Vec<Scalar>> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.feed(t)?;
        }
        Ok(last)
    }
}

fn block_step(
    l: &LayerParams,
    cache: &mut LayerCache,
    x: &[Scalar],
    pos: usize,
    freqs: &[Scalar],
    model: &Transformer,
) -> Result<Vec<Scalar>> {
    let cfg = &model.config;
    let add = |a: &[Scalar], b: &[Scalar]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    match cfg.norm_strategy {
        NormStrategy::PreNorm => {
            let a = attention_step(l, cache, &rms_norm(x, l.attn_norm.data(), cfg.eps), pos, freqs, model)?;
            let h = add(x, &a);
            let f = ffn_step(l, &rms_norm(&h, l.ffn_norm.data(), cfg.eps), cfg.d_ff);
            Ok(add(&h, &f))
        }
        NormStrategy::PostNormReorder => {
            let a = attention_step(l, cache, x, pos, freqs, model)?;
            let h = add(x, &rms_norm(&a, l.attn_norm.data(), cfg.eps));
            let f = ffn_step(l, &h, cfg.d_ff);
            Ok(add(&h, &rms_norm(&f, l.ffn_norm.data(), cfg.eps)))
        }
    }
}

fn ffn_step(l: &LayerParams, x: &[Scalar], d_ff: usize) -> Vec<Scalar> {
    let gate = vec_mat(x, l.w1.data(), d_ff);
    let up = vec_mat(x, l.w3.data(), d_ff);
    let h: Vec<Scalar> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
    vec_mat(&h, l.w2.data(), x.len())
}

fn attention_step(
    l: &LayerParams,
    cache: &mut LayerCache,
    x: &[Scalar],
    pos: usize,
    freqs: &[Scalar],
    model: &Transformer,
) -> Result<Vec<Scalar>> {
    let cfg = &model.config;
    let (heads, kv_heads, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim());
    let mut q = vec_mat(x, l.wq.data(), heads * hd);
    let mut k = vec_mat(x, l.wk.data(), kv_heads * hd);
    let v = vec_mat(x, l.wv.data(), kv_heads * hd);

    let norm = |vecs: &mut [Scalar], gains: &Option<crate::numerics::Tensor>| -> Result<()> {
        if !cfg.use_qk_norm {
            return Ok(());
        }
        let gains = gains
            .as_ref()
            .ok_or_else(|| Error::config("QK-Norm enabled but its gains are missing"))?;
        let mut xhat = vec![0.0; hd];
        for (h, chunk) in vecs.chunks_mut(hd).enumerate() {
            let src = chunk.to_vec();
            kernels::layer_norm_row(&src, &gains.data()[h * hd..(h + 1) * hd], cfg.eps, &mut xhat, chunk);
        }
        Ok(())
    };
    let rotate = |vecs: &mut [Scalar]| {
        for chunk in vecs.chunks_mut(hd) {
            kernels::rope_rotate(chunk, pos, freqs, 1.0);
        }
    };
    if cfg.qk_norm_after_rope {
        rotate(&mut q);
        rotate(&mut k);
        norm(&mut q, &l.q_norm)?;
        norm(&mut k, &l.k_norm)?;
    } else {
        norm(&mut q, &l.q_norm)?;
        norm(&mut k, &l.k_norm)?;
        rotate(&mut q);
        rotate(&mut k);
    }
    cache.keys.extend_from_slice(&k);
    cache.values.extend_from_slice(&v);

    let group = heads / kv_heads;
    let scale = 1.0 / (hd as Scalar).sqrt();
    let len = pos + 1;
    let mut out = vec![0.0; heads * hd];
    let mut scores = vec![0.0; len];
    let mut probs = vec![0.0; len];
    for h in 0..heads {
        let kh = h / group;
        let qh = &q[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &cache.keys[(j * kv_heads + kh) * hd..][..hd];
            *s = scale * kernels::dot(qh, kj);
        }
        kernels::softmax_row(&scores, &mut probs);
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, &p) in probs.iter().enumerate() {
            let vj = &cache.values[(j * kv_heads + kh) * hd..][..hd];
            for (o, &vv) in oh.iter_mut().zip(vj) {
                *o += p * vv;
            }
        }
    }
    Ok(vec_mat(&out, l.wo.data(), cfg.d_model))
}
