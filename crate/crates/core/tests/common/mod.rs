//! Shared pieces of the integration suites.
#![allow(dead_code)]

use chamtoy::data::synthetic::{generate, SyntheticCorpus, SyntheticSpec};
use chamtoy::data::{TokenCorpus, TokenizerSpec, Tokenizers};
use chamtoy::layers;
use chamtoy::model::{forward_batch, ForwardOptions, ModelConfig, NormStrategy, Transformer};
use chamtoy::numerics::gradcheck::{check_gradients, relative_error};
use chamtoy::numerics::{Graph, Scalar, Segment, Tensor, Var};
use chamtoy::objective::{shift_for_next_token, total_loss_graph};
use chamtoy::tokenizer::MixedVocab;
use chamtoy::{Result, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: Scalar, hi: Scalar) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One differentiable operation with the input shapes and value range it is
/// checked on. The harness reduces its output with fixed random weights.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub positive: bool,
    pub f: OpFn,
}

pub fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, $shapes:expr, $pos:expr, $f:expr) => {
            OpCase {
                name: $name,
                shapes: $shapes,
                positive: $pos,
                f: $f,
            }
        };
    }
    vec![
        case!("add (broadcast)", &[&[3, 4], &[4]], false, |g, v| g.add(v[0], v[1])),
        case!("sub (broadcast)", &[&[3, 4], &[3, 1]], false, |g, v| g.sub(v[0], v[1])),
        case!("mul", &[&[2, 3], &[2, 3]], false, |g, v| g.mul(v[0], v[1])),
        case!("div", &[&[2, 3], &[3]], true, |g, v| g.div(v[0], v[1])),
        case!("pow", &[&[2, 3], &[2, 3]], true, |g, v| g.pow(v[0], v[1])),
        case!("neg", &[&[5]], false, |g, v| Ok(g.neg(v[0]))),
        case!("exp", &[&[2, 3]], false, |g, v| Ok(g.exp(v[0]))),
        case!("log", &[&[2, 3]], true, |g, v| g.log(v[0])),
        case!("powf", &[&[2, 3]], true, |g, v| Ok(g.powf(v[0], 1.7))),
        case!("scale", &[&[4]], false, |g, v| Ok(g.scale(v[0], -0.3))),
        case!("sigmoid", &[&[2, 3]], false, |g, v| Ok(g.sigmoid(v[0]))),
        case!("silu", &[&[2, 3]], false, |g, v| Ok(g.silu(v[0]))),
        case!("matmul", &[&[3, 4], &[4, 2]], false, |g, v| g.matmul(v[0], v[1])),
        case!("transpose", &[&[3, 4]], false, |g, v| g.transpose(v[0])),
        case!("reshape", &[&[2, 6]], false, |g, v| g.reshape(v[0], vec![3, 4])),
        case!("sum", &[&[3, 4]], false, |g, v| g.sum(v[0], 0)),
        case!("mean", &[&[3, 4]], false, |g, v| g.mean(v[0], 1)),
        case!("max", &[&[3, 4]], false, |g, v| g.max(v[0], 1)),
        case!("rms", &[&[3, 4]], false, |g, v| g.rms(v[0], 1)),
        case!("sum_all", &[&[3, 4]], false, |g, v| g.sum_all(v[0])),
        case!("softmax", &[&[3, 5]], false, |g, v| g.softmax(v[0], 1)),
        case!("rms_norm", &[&[3, 4], &[4]], false, |g, v| g.rms_norm(v[0], v[1], 1e-5)),
        case!("layer_norm", &[&[3, 4], &[4]], false, |g, v| g.layer_norm(v[0], v[1], 1e-5)),
        case!("rope", &[&[4, 2, 4]], false, |g, v| g.rope(v[0], &[0, 1, 2, 7], 10000.0)),
        case!("causal_attention (gqa, packed)", &[&[5, 2, 4], &[5, 1, 4], &[5, 1, 4]], false, |g, v| {
            g.causal_attention(v[0], v[1], v[2], &Segment::packed(&[3, 2]))
        }),
        case!("embedding", &[&[6, 3]], false, |g, v| g.embedding(v[0], &[0, 2, 2, 5])),
        case!("mask_mul", &[&[2, 3]], false, |g, v| g.mask_mul(v[0], vec![0.0, 2.0, 1.0, 1.0, 0.0, 2.0])),
        case!("cross_entropy", &[&[4, 5]], false, |g, v| {
            g.cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true])
        }),
        case!("z_loss", &[&[4, 5]], false, |g, v| g.z_loss(v[0], &[true, true, false, true], 0.1)),
        case!("swiglu_ffn", &[&[3, 4], &[4, 6], &[6, 4], &[4, 6]], false, |g, v| {
            layers::swiglu_ffn(g, v[0], v[1], v[2], v[3])
        }),
        case!("qk_norm", &[&[3, 2, 4], &[3, 1, 4], &[2, 4], &[1, 4]], false, |g, v| {
            let (q, k) = layers::qk_norm(g, v[0], v[1], v[2], v[3], 1e-5)?;
            let q = g.sum_all(q)?;
            let k = g.mul(k, k)?;
            let k = g.sum_all(k)?;
            g.add(q, k)
        }),
    ]
}

/// Worst relative error of `case` at `seed`, with the output contracted
/// against random weights so every output element matters.
pub fn check_op(case: &OpCase, seed: u64) -> Scalar {
    let mut r = rng(seed);
    let (lo, hi) = if case.positive { (0.5, 2.0) } else { (-2.0, 2.0) };
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut r, s, lo, hi)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.f)(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let w = random_tensor(&mut r, &out_shape, -1.0, 1.0);
    check_gradients(&inputs, 1e-5, |g, v| {
        let out = (case.f)(g, v)?;
        let w = g.constant(w.clone());
        let y = g.mul(out, w)?;
        g.sum_all(y)
    })
    .unwrap()
    .max_rel_err
}

/// A small two-layer model; `variant` walks through the norm placements and
/// attention switches.
pub fn tiny_config(variant: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: if variant % 2 == 0 { 1 } else { 2 },
        d_ff: 12,
        context_length: 8,
        text_vocab: 6,
        codebook_size: 3,
        norm_strategy: if variant % 3 == 0 {
            NormStrategy::PostNormReorder
        } else {
            NormStrategy::PreNorm
        },
        use_qk_norm: variant % 4 != 1,
        qk_norm_after_rope: variant % 5 == 0,
        dropout_p: if variant % 7 == 0 { 0.2 } else { 0.0 },
        z_loss_coeff: 1e-2,
        tie_embeddings: variant % 6 == 0,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

/// Worst relative error over `probes` randomly chosen parameter elements of
/// a two-layer model's total loss (cross-entropy plus z-loss, dropout with
/// a fixed mask).
pub fn check_model(seed: u64, probes: usize) -> Scalar {
    let cfg = tiny_config(seed);
    let mut r = rng(seed);
    let model = Transformer::new(cfg.clone(), &mut r).unwrap();
    let vocab = cfg.vocab_size();
    let seqs = [random_tokens(&mut r, 6, vocab), random_tokens(&mut r, 4, vocab)];
    let loss = |params: &chamtoy::model::ModelParams, g: &mut Graph| -> (Var, Vec<Var>) {
        let vars = params.bind(g);
        let inputs: Vec<&[TokenId]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let mut drop = rng(seed ^ 0xD0);
        let t = forward_batch(g, &vars, &cfg, &inputs, ForwardOptions::train(), &mut drop).unwrap();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for s in &seqs {
            let (_, tg, m) = shift_for_next_token(s, &vec![true; s.len()]).unwrap();
            targets.extend_from_slice(tg);
            mask.extend(m);
        }
        mask[1] = false;
        let l = total_loss_graph(g, t.logits, &targets, &mask, cfg.z_loss_coeff).unwrap();
        (l.total, vars.vars())
    };
    let mut g = Graph::new();
    let (root, vars) = loss(&model.params, &mut g);
    let grads = g.backward(root).unwrap();
    let tensors = model.params.tensors();
    let mut worst: Scalar = 0.0;
    let h = 1e-5;
    for _ in 0..probes {
        let i = r.random_range(0..tensors.len());
        let j = r.random_range(0..tensors[i].len());
        let analytic = grads.get_or_zeros(vars[i], tensors[i]).data()[j];
        let eval = |delta: Scalar| {
            let mut p = model.params.clone();
            p.tensors_mut()[i].data_mut()[j] += delta;
            let mut g = Graph::new();
            let (root, _) = loss(&p, &mut g);
            g.value(root).item().unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

/// The synthetic corpus with trained tokenizers and its token form.
pub struct Toy {
    pub corpus: SyntheticCorpus,
    pub tok: Tokenizers,
    pub tokens: TokenCorpus,
}

pub fn toy(spec: &SyntheticSpec, seed: u64) -> Toy {
    let mut r = rng(seed);
    let corpus = generate(spec, &mut r).unwrap();
    let lookup = |p: &str| corpus.image(p);
    let (tok, _) = Tokenizers::train(&corpus.records, &lookup, &TokenizerSpec::default(), &mut r).unwrap();
    let tokens = TokenCorpus::encode(&corpus.records, &tok.encoder(), &lookup).unwrap();
    Toy { corpus, tok, tokens }
}

/// Independent block-structure oracle: BOI and EOI alternate strictly, each
/// block holds exactly `k` image tokens and nothing else, and image tokens
/// never appear outside a block.
pub fn well_formed(seq: &[TokenId], vocab: &MixedVocab, k: usize, allow_open_tail: bool) -> bool {
    let mut inside: Option<usize> = None;
    for &t in seq {
        if t == vocab.boi() {
            if inside.is_some() {
                return false;
            }
            inside = Some(0);
        } else if t == vocab.eoi() {
            if inside != Some(k) {
                return false;
            }
            inside = None;
        } else if vocab.is_image(t) {
            match inside {
                Some(n) if n < k => inside = Some(n + 1),
                _ => return false,
            }
        } else if inside.is_some() {
            return false;
        }
    }
    allow_open_tail || inside.is_none()
}

/// A decoding-sized model over `vocab` with context `context`.
pub fn decoding_model(seed: u64, vocab: &MixedVocab, context: usize) -> Transformer {
    let cfg = ModelConfig {
        context_length: context,
        text_vocab: vocab.text_size(),
        codebook_size: vocab.codebook_size(),
        dropout_p: 0.0,
        ..tiny_config(seed)
    };
    Transformer::new(cfg, &mut rng(seed)).unwrap()
}
