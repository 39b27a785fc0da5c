use super::kernels;
use super::tensor::{axis_split, broadcast_index_map, broadcast_shape, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that attend only among themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Segments for `lens.len()` sequences laid end to end.
    pub fn packed(lens: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Pow(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    PowScalar(Var, Scalar),
    Scale(Var, Scalar),
    Sigmoid(Var),
    Silu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, arg: Vec<usize> },
    Rms { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<Scalar> },
    LayerNorm { x: Var, gain: Var, xhat: Vec<Scalar>, inv_std: Vec<Scalar> },
    Rope { x: Var, positions: Vec<usize>, freqs: Vec<Scalar> },
    Attention(Box<AttentionSaved>),
    Embedding { table: Var, ids: Vec<usize> },
    MaskMul { x: Var, mask: Vec<Scalar> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<Scalar>, count: usize },
    ZLoss { logits: Var, mask: Vec<bool>, probs: Vec<Scalar>, lse: Vec<Scalar>, count: usize, coeff: Scalar },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<Segment>,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
    scale: Scalar,
    /// Per segment, per head, a `len × len` row-stochastic lower-triangular block.
    probs: Vec<Scalar>,
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(x) | Exp(x) | Log(x) | PowScalar(x, _) | Scale(x, _) | Sigmoid(x) | Silu(x)
            | Transpose(x) | Reshape(x) => vec![*x],
            Sum { x, .. } | Mean { x, .. } | Max { x, .. } | Rms { x, .. } | Softmax { x, .. } => {
                vec![*x]
            }
            RmsNorm { x, gain, .. } | LayerNorm { x, gain, .. } => vec![*x, *gain],
            Rope { x, .. } | MaskMul { x, .. } => vec![*x],
            Attention(s) => vec![s.q, s.k, s.v],
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } | ZLoss { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of tensor operations for one reverse pass.
///
/// Nodes are appended as operations execute, so every node's parents have
/// smaller indices and the node list is already in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: &[Scalar]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), contribution.to_vec()).expect("gradient shape"));
        }
    }
}

/// Sums a gradient of the broadcast shape back down to `in_shape`.
fn unbroadcast(grad: &[Scalar], in_shape: &[usize], out_shape: &[usize]) -> Vec<Scalar> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, &i) in grad.iter().zip(&map) {
        out[i] += g;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Direct inputs of `v`, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Adds a leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let data: Vec<Scalar> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise `a^b`; the base must be positive.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("pow with non-positive base".into()));
        }
        self.binary(a, b, Scalar::powf, Op::Pow)
    }

    fn unary(&mut self, x: Var, f: impl Fn(Scalar) -> Scalar, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Scalar::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        Ok(self.unary(x, Scalar::ln, Op::Log(x)))
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: Scalar) -> Var {
        self.unary(x, |v| v.powf(p), Op::PowScalar(x, p))
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu(x))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} · {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[m, n] = t.shape() else {
            return Err(Error::shape("transpose needs a rank-2 tensor"));
        };
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    fn reduce(
        &mut self,
        x: Var,
        axis: usize,
        f: impl Fn(&[Scalar]) -> Scalar,
    ) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        if len == 0 {
            return Err(Error::Empty(format!("reduction over empty axis {axis}")));
        }
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = t.data()[(o * len + l) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(x, axis, |r| r.iter().sum())?;
        Ok(self.push(t, Op::Sum { x, axis }))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(x, axis, |r| r.iter().sum::<Scalar>() / r.len() as Scalar)?;
        Ok(self.push(t, Op::Mean { x, axis }))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal element.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut arg = Vec::new();
        let t = self.reduce(x, axis, |r| {
            r.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max)
        })?;
        {
            let src = self.value(x);
            let (outer, len, inner) = axis_split(src.shape(), axis)?;
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for l in 1..len {
                        if src.data()[(o * len + l) * inner + i] > src.data()[(o * len + best) * inner + i] {
                            best = l;
                        }
                    }
                    arg.push(best);
                }
            }
        }
        Ok(self.push(t, Op::Max { x, axis, arg }))
    }

    /// Root mean square along `axis`.
    pub fn rms(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(x, axis, |r| {
            (r.iter().map(|v| v * v).sum::<Scalar>() / r.len() as Scalar).sqrt()
        })?;
        Ok(self.push(t, Op::Rms { x, axis }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; t.len()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = t.data()[(o * len + l) * inner + i];
                }
                kernels::softmax_row(&buf, &mut res);
                for (l, r) in res.iter().enumerate() {
                    out[(o * len + l) * inner + i] = *r;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    fn check_trailing_gain(&self, x: Var, gain: Var, what: &str) -> Result<()> {
        let (xs, gs) = (self.value(x).shape(), self.value(gain).shape());
        if gs.is_empty() || gs.len() > xs.len() || xs[xs.len() - gs.len()..] != *gs {
            return Err(Error::shape(format!(
                "{what}: gain {gs:?} does not match trailing dims of {xs:?}"
            )));
        }
        Ok(())
    }

    /// RMSNorm over the last axis. `gain` covers the trailing dimensions of `x`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: Scalar) -> Result<Var> {
        self.check_trailing_gain(x, gain, "rms_norm")?;
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.last_dim();
        let rows = tx.len() / d;
        let mut y = vec![0.0; tx.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let g0 = (r * d) % tg.len();
            let ms = tx.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<Scalar>();
            if ms == 0.0 && eps == 0.0 {
                return Err(Error::Domain("rms_norm of a zero vector with eps = 0".into()));
            }
            inv_rms.push(kernels::rms_norm_row(
                &tx.data()[r * d..(r + 1) * d],
                &tg.data()[g0..g0 + d],
                eps,
                &mut y[r * d..(r + 1) * d],
            ));
        }
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Bias-free layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: Scalar) -> Result<Var> {
        self.check_trailing_gain(x, gain, "layer_norm")?;
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.last_dim();
        let rows = tx.len() / d;
        let mut y = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let g0 = (r * d) % tg.len();
            let span = r * d..(r + 1) * d;
            inv_std.push(kernels::layer_norm_row(
                &tx.data()[span.clone()],
                &tg.data()[g0..g0 + d],
                eps,
                &mut xhat[span.clone()],
                &mut y[span],
            ));
        }
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, xhat, inv_std }))
    }

    /// Rotary embedding of `x: [rows, heads, head_dim]`, row `r` at `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: Scalar) -> Result<Var> {
        let t = self.value(x);
        let &[rows, heads, hd] = t.shape() else {
            return Err(Error::shape("rope expects [rows, heads, head_dim]"));
        };
        if hd % 2 != 0 {
            return Err(Error::shape(format!("rope needs an even head_dim, got {hd}")));
        }
        if positions.len() != rows {
            return Err(Error::shape("rope: one position per row required"));
        }
        let freqs = kernels::rope_frequencies(hd, base);
        let mut data = t.data().to_vec();
        for (r, &pos) in positions.iter().enumerate() {
            for h in 0..heads {
                let off = (r * heads + h) * hd;
                kernels::rope_rotate(&mut data[off..off + hd], pos, &freqs, 1.0);
            }
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                freqs,
            },
        ))
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    ///
    /// `q: [rows, heads, hd]`, `k, v: [rows, kv_heads, hd]`. Rows attend to
    /// earlier-or-equal rows of their own segment only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let &[rows, heads, hd] = tq.shape() else {
            return Err(Error::shape("attention q must be [rows, heads, head_dim]"));
        };
        let &[rows_k, kv_heads, hd_k] = tk.shape() else {
            return Err(Error::shape("attention k must be [rows, kv_heads, head_dim]"));
        };
        if tv.shape() != tk.shape() || rows_k != rows || hd_k != hd {
            return Err(Error::shape(format!(
                "attention shapes disagree: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if kv_heads == 0 || heads % kv_heads != 0 {
            return Err(Error::shape(format!(
                "{kv_heads} kv heads do not divide {heads} query heads"
            )));
        }
        let mut next = 0;
        for s in segments {
            if s.start != next {
                return Err(Error::shape("attention segments must tile the rows in order"));
            }
            next += s.len;
        }
        if next != rows {
            return Err(Error::shape("attention segments must cover every row"));
        }
        let group = heads / kv_heads;
        let scale = 1.0 / (hd as Scalar).sqrt();
        let mut out = vec![0.0; rows * heads * hd];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| heads * s.len * s.len).sum());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let kh = h / group;
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let qi = &qd[((seg.start + i) * heads + h) * hd..][..hd];
                    let row = &mut probs[base + i * len..base + i * len + len];
                    for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[((seg.start + j) * kv_heads + kh) * hd..][..hd];
                        *r = scale * kernels::dot(qi, kj);
                    }
                    let scores = row[..=i].to_vec();
                    kernels::softmax_row(&scores, &mut row[..=i]);
                    let oi = &mut out[((seg.start + i) * heads + h) * hd..][..hd];
                    for (j, &p) in row[..=i].iter().enumerate() {
                        let vj = &vd[((seg.start + j) * kv_heads + kh) * hd..][..hd];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, heads, hd], out)?;
        Ok(self.push(
            t,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                kv_heads,
                head_dim: hd,
                scale,
                probs,
            })),
        ))
    }

    /// Attention weights saved by a [`Graph::causal_attention`] node: for each
    /// segment and head, a `len × len` block. Returns `None` for other nodes.
    pub fn attention_probs(&self, v: Var) -> Option<(&[Segment], usize, &[Scalar])> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((&s.segments, s.heads, &s.probs)),
            _ => None,
        }
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[vocab, d] = t.shape() else {
            return Err(Error::shape("embedding table must be rank 2"));
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multiplies by a constant mask of the same shape (used for dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<Scalar>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::shape("mask length differs from tensor length"));
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskMul { x, mask }))
    }

    fn check_loss_inputs(&self, logits: Var, n: usize, mask: &[bool]) -> Result<(usize, usize)> {
        let t = self.value(logits);
        let &[rows, vocab] = t.shape() else {
            return Err(Error::shape("logits must be [seq, vocab]"));
        };
        if rows != n || mask.len() != rows {
            return Err(Error::shape(format!(
                "{rows} logit rows, {n} targets, {} mask bits",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        Ok((rows, vocab))
    }

    /// Mean negative log-likelihood over positions whose mask bit is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.check_loss_inputs(logits, targets.len(), mask)?;
        let t = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r];
            if tgt >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: tgt as u32,
                    size: vocab,
                });
            }
            let row = t.row(r);
            let lse = kernels::logsumexp(row);
            total += lse - row[tgt];
            kernels::softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            count += 1;
        }
        let value = Tensor::scalar(total / count as Scalar);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// `coeff · mean (log Z)²` over unmasked positions, `log Z` computed with max shift.
    pub fn z_loss(&mut self, logits: Var, mask: &[bool], coeff: Scalar) -> Result<Var> {
        let (rows, vocab) = self.check_loss_inputs(logits, mask.len(), mask)?;
        if coeff < 0.0 {
            return Err(Error::config("z-loss coefficient must be non-negative"));
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut lse = vec![0.0; rows];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = t.row(r);
            lse[r] = kernels::logsumexp(row);
            total += lse[r] * lse[r];
            kernels::softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            count += 1;
        }
        let value = Tensor::scalar(coeff * total / count as Scalar);
        Ok(self.push(
            value,
            Op::ZLoss {
                logits,
                mask: mask.to_vec(),
                probs,
                lse,
                count,
                coeff,
            },
        ))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g.data(), &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[Scalar], grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contribution: &[Scalar]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], self.nodes[v.0].value.shape(), contribution);
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                send(*a, &unbroadcast(g, val(*a).shape(), out.shape()));
                let gb = unbroadcast(g, val(*b).shape(), out.shape());
                if matches!(node.op, Op::Sub(..)) {
                    let neg: Vec<Scalar> = gb.iter().map(|v| -v).collect();
                    send(*b, &neg);
                } else {
                    send(*b, &gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) | Op::Pow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ma = broadcast_index_map(ta.shape(), out.shape());
                let mb = broadcast_index_map(tb.shape(), out.shape());
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for (idx, &gi) in g.iter().enumerate() {
                    let (x, y) = (ta.data()[ma[idx]], tb.data()[mb[idx]]);
                    let (da, db) = match node.op {
                        Op::Mul(..) => (y, x),
                        Op::Div(..) => (1.0 / y, -x / (y * y)),
                        _ => (y * x.powf(y - 1.0), out.data()[idx] * x.ln()),
                    };
                    ga[ma[idx]] += gi * da;
                    gb[mb[idx]] += gi * db;
                }
                send(*a, &ga);
                send(*b, &gb);
            }
            Op::Neg(x) => send(*x, &g.iter().map(|v| -v).collect::<Vec<_>>()),
            Op::Exp(x) => {
                let d: Vec<Scalar> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                send(*x, &d);
            }
            Op::Log(x) => {
                let d: Vec<Scalar> = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                send(*x, &d);
            }
            Op::PowScalar(x, p) => {
                let d: Vec<Scalar> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect();
                send(*x, &d);
            }
            Op::Scale(x, c) => send(*x, &g.iter().map(|v| v * c).collect::<Vec<_>>()),
            Op::Sigmoid(x) => {
                let d: Vec<Scalar> = g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                send(*x, &d);
            }
            Op::Silu(x) => {
                let d: Vec<Scalar> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*x, &d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    send(*a, &kernels::matmul_nt(g, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, &kernels::matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[c * m + r] = g[r * n + c];
                    }
                }
                send(*x, &d);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Sum { x, axis } | Op::Mean { x, axis } | Op::Rms { x, axis } => {
                let tx = val(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis).expect("checked in forward");
                let mut d = vec![0.0; tx.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let gi = g[o * inner + c];
                        let y = out.data()[o * inner + c];
                        for l in 0..len {
                            let idx = (o * len + l) * inner + c;
                            d[idx] = match node.op {
                                Op::Sum { .. } => gi,
                                Op::Mean { .. } => gi / len as Scalar,
                                _ if y == 0.0 => 0.0,
                                _ => gi * tx.data()[idx] / (len as Scalar * y),
                            };
                        }
                    }
                }
                send(*x, &d);
            }
            Op::Max { x, axis, arg } => {
                let tx = val(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis).expect("checked in forward");
                let mut d = vec![0.0; tx.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let j = o * inner + c;
                        d[(o * len + arg[j]) * inner + c] = g[j];
                    }
                }
                send(*x, &d);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).expect("checked in forward");
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + c;
                        let s: Scalar = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y[at(l)] * (g[at(l)] - s);
                        }
                    }
                }
                send(*x, &d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let d = tx.last_dim();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; tg.len()];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let g0 = (r * d) % tg.len();
                    let xs = &tx.data()[r * d..(r + 1) * d];
                    let gs = &tg.data()[g0..g0 + d];
                    let dy = &g[r * d..(r + 1) * d];
                    let mut proj = 0.0;
                    for j in 0..d {
                        proj += gs[j] * dy[j] * xs[j];
                        dg[g0 + j] += dy[j] * xs[j] * inv;
                    }
                    let coef = inv * inv * inv * proj / d as Scalar;
                    for j in 0..d {
                        dx[r * d + j] = inv * gs[j] * dy[j] - coef * xs[j];
                    }
                }
                send(*x, &dx);
                send(*gain, &dg);
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                let (tx, tg) = (val(*x), val(*gain));
                let d = tx.last_dim();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; tg.len()];
                for (r, &s) in inv_std.iter().enumerate() {
                    let g0 = (r * d) % tg.len();
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gs = &tg.data()[g0..g0 + d];
                    let dy = &g[r * d..(r + 1) * d];
                    let mut mean_u = 0.0;
                    let mut mean_ux = 0.0;
                    for j in 0..d {
                        let u = gs[j] * dy[j];
                        mean_u += u;
                        mean_ux += u * xh[j];
                        dg[g0 + j] += dy[j] * xh[j];
                    }
                    mean_u /= d as Scalar;
                    mean_ux /= d as Scalar;
                    for j in 0..d {
                        dx[r * d + j] = s * (gs[j] * dy[j] - mean_u - xh[j] * mean_ux);
                    }
                }
                send(*x, &dx);
                send(*gain, &dg);
            }
            Op::Rope { x, positions, freqs } => {
                let (heads, hd) = (out.shape()[1], out.shape()[2]);
                let mut d = g.to_vec();
                for (r, &pos) in positions.iter().enumerate() {
                    for h in 0..heads {
                        let off = (r * heads + h) * hd;
                        kernels::rope_rotate(&mut d[off..off + hd], pos, freqs, -1.0);
                    }
                }
                send(*x, &d);
            }
            Op::Attention(s) => {
                let (gq, gk, gv) = attention_backward(s, val(s.q), val(s.k), val(s.v), g);
                send(s.q, &gq);
                send(s.k, &gk);
                send(s.v, &gv);
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                send(*table, &dt);
            }
            Op::MaskMul { x, mask } => {
                let d: Vec<Scalar> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                send(*x, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = val(*logits).last_dim();
                let w = g[0] / *count as Scalar;
                let mut d = vec![0.0; probs.len()];
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..vocab {
                        d[r * vocab + j] = w * probs[r * vocab + j];
                    }
                    d[r * vocab + targets[r]] -= w;
                }
                send(*logits, &d);
            }
            Op::ZLoss {
                logits,
                mask,
                probs,
                lse,
                count,
                coeff,
            } => {
                let vocab = val(*logits).last_dim();
                let mut d = vec![0.0; probs.len()];
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let w = g[0] * coeff * 2.0 * lse[r] / *count as Scalar;
                    for j in 0..vocab {
                        d[r * vocab + j] = w * probs[r * vocab + j];
                    }
                }
                send(*logits, &d);
            }
        }
    }
}

fn attention_backward(
    s: &AttentionSaved,
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    g: &[Scalar],
) -> (Vec<Scalar>, Vec<Scalar>, Vec<Scalar>) {
    let (heads, kv_heads, hd) = (s.heads, s.kv_heads, s.head_dim);
    let group = heads / kv_heads;
    let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut base = 0;
    for seg in &s.segments {
        let len = seg.len;
        for h in 0..heads {
            let kh = h / group;
            let p = &s.probs[base..base + len * len];
            base += len * len;
            let mut dp = vec![0.0; len];
            for i in 0..len {
                let qi_off = ((seg.start + i) * heads + h) * hd;
                let go = &g[qi_off..qi_off + hd];
                let prow = &p[i * len..i * len + i + 1];
                for j in 0..=i {
                    let vj_off = ((seg.start + j) * kv_heads + kh) * hd;
                    dp[j] = kernels::dot(go, &vd[vj_off..vj_off + hd]);
                    for t in 0..hd {
                        gv[vj_off + t] += prow[j] * go[t];
                    }
                }
                let inner: Scalar = (0..=i).map(|j| prow[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - inner) * s.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = ((seg.start + j) * kv_heads + kh) * hd;
                    for t in 0..hd {
                        gq[qi_off + t] += ds * kd[kj_off + t];
                        gk[kj_off + t] += ds * qd[qi_off + t];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
