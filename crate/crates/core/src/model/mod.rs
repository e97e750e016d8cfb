//! Model zoo: a small transformer used three ways (bidirectional denoiser,
//! causal teacher) and the Bernoulli unmasking planner head that rides on
//! the denoiser's hidden states.

mod planner;
mod transformer;

pub use planner::{PlannerConfig, PlannerHead, TIME_FEATURES};
pub use transformer::{
    teacher_logprobs, AttentionKind, Transformer, TransformerConfig, TransformerOut,
};

use crate::autodiff::{BoundParams, Graph, ParamMap, Tensor, Var};
use crate::error::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian init scaled by fan-in for weight matrices.
pub(crate) fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// Gaussian init with fixed small scale for embedding tables.
pub(crate) fn init_embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.02).unwrap();
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// x @ w + b with the bias broadcast over rows.
pub(crate) fn affine(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    w: &str,
    b: &str,
) -> Result<Var> {
    let h = g.matmul(x, bound.var(w))?;
    g.add(h, bound.var(b))
}

pub(crate) fn silu(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.sigmoid(x)?;
    g.mul(x, s)
}

/// Layer norm with learned gain/shift looked up by name.
pub(crate) fn layer_norm_named(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    gamma: &str,
    beta: &str,
) -> Result<Var> {
    let gv = bound.var(gamma);
    let bv = bound.var(beta);
    g.layer_norm(x, gv, bv, LN_EPS)
}

/// Multi-head self-attention over `[L, d]` activations. Heads are column
/// slices; an optional additive mask (e.g. causal) is applied to the raw
/// scores before the softmax.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    n_heads: usize,
    score_mask: Option<Var>,
) -> Result<Var> {
    let d = g.value(x).shape()[1];
    let dh = d / n_heads;
    let q = affine(g, x, bound, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = affine(g, x, bound, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = affine(g, x, bound, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let raw = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(raw, 1.0 / (dh as f64).sqrt())?;
        if let Some(mask) = score_mask {
            scores = g.add(scores, mask)?;
        }
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat(&heads, 1)?;
    affine(g, ctx, bound, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Additive causal mask: 0 at or below the diagonal, a large negative
/// constant above. Finite so masked rows stay NaN-free under max
/// subtraction.
pub(crate) fn causal_mask(g: &mut Graph, l: usize) -> Var {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = -1e9;
        }
    }
    g.constant(Tensor::new(vec![l, l], data).unwrap())
}

/// Insert attention + MLP parameters for one transformer block.
pub(crate) fn insert_block_params(
    params: &mut ParamMap,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.attn.{w}"), init_linear(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("{prefix}.attn.{b}"), Tensor::zeros(vec![d]));
    }
    params.insert(format!("{prefix}.mlp.w1"), init_linear(rng, d, mlp_hidden));
    params.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![mlp_hidden]));
    params.insert(format!("{prefix}.mlp.w2"), init_linear(rng, mlp_hidden, d));
    params.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![d]));
}

pub(crate) fn mlp_block(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let h = affine(g, x, bound, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let a = silu(g, h)?;
    affine(g, a, bound, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// Uniform helper so perturbation tests can nudge one parameter entry.
pub fn perturb(params: &mut ParamMap, name: &str, coord: usize, delta: f64) {
    params.get_mut(name).data_mut()[coord] += delta;
}

/// Sample token ids below `vocab` for tests.
pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}
