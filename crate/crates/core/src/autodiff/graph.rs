//! Reverse-mode autodiff on a Wengert tape.
//!
//! Values are computed eagerly as operations are recorded; `backward` walks
//! the tape in reverse and accumulates vector-Jacobian products additively,
//! so fan-out just works. Gradient rules are dispatched through a single
//! `OpKind` table, which lets the property tests iterate every primitive
//! and finite-difference it.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op
//! may be a scalar or a suffix of the left operand's shape (a `[n]` bias
//! against `[L, n]` activations). Nothing else broadcasts.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable numerical floor used when clamping probabilities before logs.
pub const PROB_EPS: f64 = 1e-12;

/// Identifier of a recorded operation. The list doubles as the gradient
/// rule table: tests iterate `OpKind::ALL` and check every rule against
/// central finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    DivScalar,
    Scale,
    Exp,
    Ln,
    Sigmoid,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gather,
    Slice,
    Concat,
    Reshape,
    SumReduce,
    MeanReduce,
    EMax,
    StopGrad,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::DivScalar,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Gather,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::SumReduce,
        OpKind::MeanReduce,
        OpKind::EMax,
        OpKind::StopGrad,
    ];
}

/// Per-op attributes that are not differentiable inputs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Attrs {
    None,
    Scalar(f64),
    MatMul { transpose_b: bool },
    Gather { indices: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    LayerNorm { eps: f64 },
}

#[derive(Debug, Clone)]
struct Recorded {
    kind: OpKind,
    attrs: Attrs,
    inputs: Vec<Var>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Recorded>,
    needs_grad: bool,
}

/// Handle to a node on a specific graph. Using a `Var` with the wrong
/// graph is a programmer error and panics on index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// The tape. Operations append nodes; `backward` replays them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

// ---------------------------------------------------------------------------
// broadcast helpers

/// Cycle length for right-operand broadcast: equal shapes, scalar right
/// operand, or right shape a suffix of the left shape.
fn broadcast_cycle(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<usize> {
    if rhs.len() == 1 {
        return Ok(1);
    }
    if lhs.shape() == rhs.shape() || lhs.shape().ends_with(rhs.shape()) {
        if lhs.len() % rhs.len() == 0 {
            return Ok(rhs.len());
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    })
}

fn binary_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let cyc = broadcast_cycle(op, a, b)?;
    let bd = b.data();
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % cyc]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sum a gradient of the broadcast output back down to the right operand's
/// shape (sum over the broadcast leading block).
fn reduce_to_rhs(grad: &[f64], rhs: &Tensor) -> Tensor {
    let blen = rhs.len();
    let mut out = vec![0.0; blen];
    for (i, &g) in grad.iter().enumerate() {
        out[i % blen] += g;
    }
    Tensor::new(rhs.shape().to_vec(), out).unwrap()
}

/// (outer, axis_dim, inner) decomposition for axis-wise copies.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// forward kernels

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if transpose_b {
        // b stored [n, k]; out[i, j] = dot(a_row_i, b_row_j)
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc = ar[p].mul_add(br[p], acc);
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        // b stored [k, n]; classic i-p-j loop keeps b access contiguous
        for i in 0..m {
            let or = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    or[j] = av.mul_add(br[j], or[j]);
                }
            }
        }
    }
    out
}

fn matmul_shapes(
    a: &Tensor,
    b: &Tensor,
    transpose_b: bool,
) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = if transpose_b {
        (b.shape()[0], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[0])
    };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((m, k, n))
}

fn softmax_rows(data: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..data.len() / row {
        let s = &data[r * row..(r + 1) * row];
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let o = &mut out[r * row..(r + 1) * row];
        for (i, &x) in s.iter().enumerate() {
            let e = (x - mx).exp();
            o[i] = e;
            z += e;
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn log_softmax_rows(data: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..data.len() / row {
        let s = &data[r * row..(r + 1) * row];
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|&x| (x - mx).exp()).sum();
        let lz = mx + z.ln();
        for (i, &x) in s.iter().enumerate() {
            out[r * row + i] = x - lz;
        }
    }
    out
}

fn apply(kind: OpKind, attrs: &Attrs, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            let transpose_b = match attrs {
                Attrs::MatMul { transpose_b } => *transpose_b,
                _ => unreachable!(),
            };
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_shapes(a, b, transpose_b)?;
            let data = matmul_kernel(a.data(), b.data(), m, k, n, transpose_b);
            Tensor::new(vec![m, n], data)
        }
        OpKind::Add => binary_map("add", inputs[0], inputs[1], |x, y| x + y),
        OpKind::Sub => binary_map("sub", inputs[0], inputs[1], |x, y| x - y),
        OpKind::Mul => binary_map("mul", inputs[0], inputs[1], |x, y| x * y),
        OpKind::Div => {
            if inputs[1].data().iter().any(|&y| y == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    msg: "zero denominator".into(),
                });
            }
            binary_map("div", inputs[0], inputs[1], |x, y| x / y)
        }
        OpKind::DivScalar => {
            let c = match attrs {
                Attrs::Scalar(c) => *c,
                _ => unreachable!(),
            };
            if c == 0.0 {
                return Err(Error::Domain {
                    op: "div_scalar",
                    msg: "division by zero".into(),
                });
            }
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v / c).collect())
        }
        OpKind::Scale => {
            let c = match attrs {
                Attrs::Scalar(c) => *c,
                _ => unreachable!(),
            };
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())
        }
        OpKind::Exp => {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.exp()).collect())
        }
        OpKind::Ln => {
            let x = inputs[0];
            if x.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "ln",
                    msg: "log of nonpositive value".into(),
                });
            }
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.ln()).collect())
        }
        OpKind::Sigmoid => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    // split form avoids overflow on large |v|
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        OpKind::Softmax => {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), x.last_dim()))
        }
        OpKind::LogSoftmax => {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), log_softmax_rows(x.data(), x.last_dim()))
        }
        OpKind::LayerNorm => {
            let eps = match attrs {
                Attrs::LayerNorm { eps } => *eps,
                _ => unreachable!(),
            };
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = x.last_dim();
            if gamma.shape() != [d] || beta.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gamma.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / d {
                let s = &x.data()[r * d..(r + 1) * d];
                let mean = s.iter().sum::<f64>() / d as f64;
                let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..d {
                    out[r * d + i] = (s[i] - mean) * inv * gamma.data()[i] + beta.data()[i];
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        OpKind::Gather => {
            let indices = match attrs {
                Attrs::Gather { indices } => indices,
                _ => unreachable!(),
            };
            let x = inputs[0];
            let dim0 = x.shape()[0];
            let row = x.len() / dim0;
            let mut data = Vec::with_capacity(indices.len() * row);
            for &ix in indices {
                if ix >= dim0 {
                    return Err(Error::invalid(format!(
                        "gather index {ix} out of bounds for dim {dim0}"
                    )));
                }
                data.extend_from_slice(&x.data()[ix * row..(ix + 1) * row]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)
        }
        OpKind::Slice => {
            let (axis, start, end) = match attrs {
                Attrs::Slice { axis, start, end } => (*axis, *start, *end),
                _ => unreachable!(),
            };
            let x = inputs[0];
            if axis >= x.ndim() || start >= end || end > x.shape()[axis] {
                return Err(Error::invalid(format!(
                    "slice {start}..{end} on axis {axis} of {:?}",
                    x.shape()
                )));
            }
            let (outer, dim, inner) = axis_blocks(x.shape(), axis);
            let take = end - start;
            let mut data = Vec::with_capacity(outer * take * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                data.extend_from_slice(&x.data()[base..base + take * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = take;
            Tensor::new(shape, data)
        }
        OpKind::Concat => {
            let axis = match attrs {
                Attrs::Concat { axis } => *axis,
                _ => unreachable!(),
            };
            let first = inputs[0];
            if axis >= first.ndim() {
                return Err(Error::invalid(format!(
                    "concat axis {axis} of {:?}",
                    first.shape()
                )));
            }
            let mut total = 0usize;
            for t in inputs {
                if t.ndim() != first.ndim() {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                for (ax, (&d, &d0)) in t.shape().iter().zip(first.shape()).enumerate() {
                    if ax != axis && d != d0 {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                }
                total += t.shape()[axis];
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            let (outer, _, inner) = axis_blocks(&shape, axis);
            let mut data = vec![0.0; outer * total * inner];
            let mut offset = 0usize;
            for t in inputs {
                let dim = t.shape()[axis];
                for o in 0..outer {
                    let src = &t.data()[o * dim * inner..(o + 1) * dim * inner];
                    let dst = o * total * inner + offset * inner;
                    data[dst..dst + dim * inner].copy_from_slice(src);
                }
                offset += dim;
            }
            Tensor::new(shape, data)
        }
        OpKind::Reshape => {
            let shape = match attrs {
                Attrs::Reshape { shape } => shape.clone(),
                _ => unreachable!(),
            };
            inputs[0].reshaped(shape)
        }
        OpKind::SumReduce => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::MeanReduce => {
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        OpKind::EMax => binary_map("emax", inputs[0], inputs[1], f64::max),
        OpKind::StopGrad => Ok(inputs[0].clone()),
    }
}

// ---------------------------------------------------------------------------
// gradient rules

fn vjp(
    kind: OpKind,
    attrs: &Attrs,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &Tensor,
) -> Vec<Option<Tensor>> {
    match kind {
        OpKind::MatMul => {
            let transpose_b = match attrs {
                Attrs::MatMul { transpose_b } => *transpose_b,
                _ => unreachable!(),
            };
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = output.shape()[1];
            let (ga, gb);
            if transpose_b {
                // out = a . b^T, b stored [n, k]
                ga = matmul_kernel(gout.data(), b.data(), m, n, k, false);
                let mut gbv = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout.data()[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            gbv[j * k + p] += g * a.data()[i * k + p];
                        }
                    }
                }
                gb = gbv;
            } else {
                ga = matmul_kernel(gout.data(), b.data(), m, n, k, true);
                let mut gbv = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gbv[p * n + j] += av * gout.data()[i * n + j];
                        }
                    }
                }
                gb = gbv;
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(b.shape().to_vec(), gb).unwrap()),
            ]
        }
        OpKind::Add => {
            let gb = reduce_to_rhs(gout.data(), inputs[1]);
            vec![Some(gout.clone()), Some(gb)]
        }
        OpKind::Sub => {
            let mut gb = reduce_to_rhs(gout.data(), inputs[1]);
            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
            vec![Some(gout.clone()), Some(gb)]
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let cyc = b.len();
            let ga: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * b.data()[i % cyc])
                .collect();
            let prod: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * a.data()[i])
                .collect();
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(reduce_to_rhs(&prod, b)),
            ]
        }
        OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let cyc = b.len();
            let ga: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g / b.data()[i % cyc])
                .collect();
            let prod: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let bv = b.data()[i % cyc];
                    -g * a.data()[i] / (bv * bv)
                })
                .collect();
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(reduce_to_rhs(&prod, b)),
            ]
        }
        OpKind::DivScalar => {
            let c = match attrs {
                Attrs::Scalar(c) => *c,
                _ => unreachable!(),
            };
            let g = gout.data().iter().map(|&v| v / c).collect();
            vec![Some(Tensor::new(gout.shape().to_vec(), g).unwrap())]
        }
        OpKind::Scale => {
            let c = match attrs {
                Attrs::Scalar(c) => *c,
                _ => unreachable!(),
            };
            let g = gout.data().iter().map(|&v| v * c).collect();
            vec![Some(Tensor::new(gout.shape().to_vec(), g).unwrap())]
        }
        OpKind::Exp => {
            let g = gout
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &y)| g * y)
                .collect();
            vec![Some(Tensor::new(gout.shape().to_vec(), g).unwrap())]
        }
        OpKind::Ln => {
            let g = gout
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| g / x)
                .collect();
            vec![Some(Tensor::new(gout.shape().to_vec(), g).unwrap())]
        }
        OpKind::Sigmoid => {
            let g = gout
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect();
            vec![Some(Tensor::new(gout.shape().to_vec(), g).unwrap())]
        }
        OpKind::Softmax => {
            let row = output.last_dim();
            let s = output.data();
            let mut g = vec![0.0; s.len()];
            for r in 0..s.len() / row {
                let lo = r * row;
                let dot: f64 = (0..row).map(|i| gout.data()[lo + i] * s[lo + i]).sum();
                for i in 0..row {
                    g[lo + i] = s[lo + i] * (gout.data()[lo + i] - dot);
                }
            }
            vec![Some(Tensor::new(output.shape().to_vec(), g).unwrap())]
        }
        OpKind::LogSoftmax => {
            let row = output.last_dim();
            let mut g = vec![0.0; output.len()];
            for r in 0..output.len() / row {
                let lo = r * row;
                let gsum: f64 = (0..row).map(|i| gout.data()[lo + i]).sum();
                for i in 0..row {
                    g[lo + i] = gout.data()[lo + i] - output.data()[lo + i].exp() * gsum;
                }
            }
            vec![Some(Tensor::new(output.shape().to_vec(), g).unwrap())]
        }
        OpKind::LayerNorm => {
            let eps = match attrs {
                Attrs::LayerNorm { eps } => *eps,
                _ => unreachable!(),
            };
            let (x, gamma, _beta) = (inputs[0], inputs[1], inputs[2]);
            let d = x.last_dim();
            let rows = x.len() / d;
            let mut gx = vec![0.0; x.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                let s = &x.data()[r * d..(r + 1) * d];
                let go = &gout.data()[r * d..(r + 1) * d];
                let mean = s.iter().sum::<f64>() / d as f64;
                let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = s.iter().map(|&v| (v - mean) * inv).collect();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..d {
                    let dxhat = go[i] * gamma.data()[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[i];
                    ggamma[i] += go[i] * xhat[i];
                    gbeta[i] += go[i];
                }
                for i in 0..d {
                    let dxhat = go[i] * gamma.data()[i];
                    gx[r * d + i] = inv
                        * (dxhat - sum_dxhat / d as f64 - xhat[i] * sum_dxhat_xhat / d as f64);
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gx).unwrap()),
                Some(Tensor::new(vec![d], ggamma).unwrap()),
                Some(Tensor::new(vec![d], gbeta).unwrap()),
            ]
        }
        OpKind::Gather => {
            let indices = match attrs {
                Attrs::Gather { indices } => indices,
                _ => unreachable!(),
            };
            let x = inputs[0];
            let row = x.len() / x.shape()[0];
            let mut g = vec![0.0; x.len()];
            for (slot, &ix) in indices.iter().enumerate() {
                for p in 0..row {
                    g[ix * row + p] += gout.data()[slot * row + p];
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), g).unwrap())]
        }
        OpKind::Slice => {
            let (axis, start, end) = match attrs {
                Attrs::Slice { axis, start, end } => (*axis, *start, *end),
                _ => unreachable!(),
            };
            let x = inputs[0];
            let (outer, dim, inner) = axis_blocks(x.shape(), axis);
            let take = end - start;
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * take * inner;
                g[dst..dst + take * inner].copy_from_slice(&gout.data()[src..src + take * inner]);
            }
            vec![Some(Tensor::new(x.shape().to_vec(), g).unwrap())]
        }
        OpKind::Concat => {
            let axis = match attrs {
                Attrs::Concat { axis } => *axis,
                _ => unreachable!(),
            };
            let total = output.shape()[axis];
            let (outer, _, inner) = axis_blocks(output.shape(), axis);
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0usize;
            for t in inputs {
                let dim = t.shape()[axis];
                let mut g = vec![0.0; t.len()];
                for o in 0..outer {
                    let src = o * total * inner + offset * inner;
                    let dst = o * dim * inner;
                    g[dst..dst + dim * inner]
                        .copy_from_slice(&gout.data()[src..src + dim * inner]);
                }
                offset += dim;
                grads.push(Some(Tensor::new(t.shape().to_vec(), g).unwrap()));
            }
            grads
        }
        OpKind::Reshape => {
            let x = inputs[0];
            vec![Some(gout.reshaped(x.shape().to_vec()).unwrap())]
        }
        OpKind::SumReduce => {
            let x = inputs[0];
            let g = gout.value();
            vec![Some(Tensor::full(x.shape().to_vec(), g))]
        }
        OpKind::MeanReduce => {
            let x = inputs[0];
            let g = gout.value() / x.len() as f64;
            vec![Some(Tensor::full(x.shape().to_vec(), g))]
        }
        OpKind::EMax => {
            let (a, b) = (inputs[0], inputs[1]);
            let cyc = b.len();
            // ties route the gradient to the left operand
            let ga: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| if a.data()[i] >= b.data()[i % cyc] { g } else { 0.0 })
                .collect();
            let masked: Vec<f64> = gout
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| if a.data()[i] < b.data()[i % cyc] { g } else { 0.0 })
                .collect();
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(reduce_to_rhs(&masked, b)),
            ]
        }
        OpKind::StopGrad => vec![None],
    }
}

// ---------------------------------------------------------------------------
// the tape

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Insert a leaf. Whether gradients flow into it is controlled by the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, None, needs)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, None, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Option<Recorded>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, kind: OpKind, attrs: Attrs, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = apply(kind, &attrs, &tensors)?;
        let needs_grad = kind != OpKind::StopGrad
            && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            value,
            Some(Recorded {
                kind,
                attrs,
                inputs: inputs.to_vec(),
            }),
            needs_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, Attrs::MatMul { transpose_b: false }, &[a, b])
    }

    /// `a . b^T` with `b` stored `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, Attrs::MatMul { transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, Attrs::None, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, Attrs::None, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, Attrs::None, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Div, Attrs::None, &[a, b])
    }

    pub fn div_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(OpKind::DivScalar, Attrs::Scalar(c), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(OpKind::Scale, Attrs::Scalar(c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Exp, Attrs::None, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Ln, Attrs::None, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, Attrs::None, &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Softmax, Attrs::None, &[x])
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmax, Attrs::None, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(OpKind::LayerNorm, Attrs::LayerNorm { eps }, &[x, gamma, beta])
    }

    /// Gather rows along axis 0 (also the embedding lookup).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.record(
            OpKind::Gather,
            Attrs::Gather {
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.record(OpKind::Slice, Attrs::Slice { axis, start, end }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        self.record(OpKind::Concat, Attrs::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(OpKind::Reshape, Attrs::Reshape { shape }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::SumReduce, Attrs::None, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::MeanReduce, Attrs::None, &[x])
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::EMax, Attrs::None, &[a, b])
    }

    /// Value passes through, gradient does not.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::StopGrad, Attrs::None, &[x])
    }

    /// Reverse pass from a scalar root. Deterministic: the tape is replayed
    /// strictly in reverse creation order and contributions are added in
    /// input order, so two runs from identical inputs are bitwise equal.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(rec) = self.nodes[id].op.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let tensors: Vec<&Tensor> = rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contribs = vjp(rec.kind, &rec.attrs, &tensors, &self.nodes[id].value, &gout);
            for (v, contrib) in rec.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
