//! Forward evaluation and local backward rules for every primitive.

use super::{Activation, NodeId};
use crate::error::{Error, Result};
use crate::kron::{kron_first_stage, kron_second_stage, scatter_rows, block_transpose};
use crate::matrix::{gemm_acc, Matrix};
use crate::scalar::Scalar;

/// Layer-norm variance epsilon (added inside the square root).
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// The closed set of differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Scale,
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Mish,
    GeluNew,
    Softmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Mse,
    Concat,
    KronLinear,
    // Structural helpers the encoder needs.
    Slice,
    Sum,
    ScaleBy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Silu,
        OpKind::Sigmoid,
        OpKind::Mish,
        OpKind::GeluNew,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::Mse,
        OpKind::Concat,
        OpKind::KronLinear,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::ScaleBy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Mish => "mish",
            OpKind::GeluNew => "gelu_new",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
            OpKind::Concat => "concat",
            OpKind::KronLinear => "kron_linear",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::ScaleBy => "scale_by",
        }
    }
}

/// Every primitive the graph can record.
pub fn primitive_set() -> Vec<OpKind> {
    OpKind::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    ScaleBy { a: NodeId, s: NodeId },
    Act { a: NodeId, act: Activation },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, indices: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Mse { pred: NodeId, target: NodeId },
    Concat { parts: Vec<NodeId>, axis: Axis },
    Slice { a: NodeId, r0: usize, c0: usize, rows: usize, cols: usize },
    Sum { a: NodeId },
    KronLinear { x: NodeId, a: NodeId, b: NodeId, mid_bias: Option<NodeId>, act: Activation },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Act { act, .. } => match act {
                Activation::None => OpKind::Scale,
                Activation::Relu => OpKind::Relu,
                Activation::Gelu => OpKind::Gelu,
                Activation::GeluNew => OpKind::GeluNew,
                Activation::Silu => OpKind::Silu,
                Activation::Sigmoid => OpKind::Sigmoid,
                Activation::Mish => OpKind::Mish,
            },
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum { .. } => OpKind::Sum,
            Op::KronLinear { .. } => OpKind::KronLinear,
        })
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. } | Op::Act { a, .. } | Op::Softmax { a } | Op::Sum { a } => vec![*a],
            Op::Slice { a, .. } => vec![*a],
            Op::ScaleBy { a, s } => vec![*a, *s],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::Concat { parts, .. } => parts.clone(),
            Op::KronLinear { x, a, b, mid_bias, .. } => {
                let mut v = vec![*x, *a, *b];
                v.extend(mid_bias.iter().copied());
                v
            }
        }
    }
}

/// Per-node values saved during the forward pass for use in backward.
#[derive(Debug, Clone, Default)]
pub(crate) enum Cache<T: Scalar> {
    #[default]
    None,
    LayerNorm { xhat: Matrix<T>, rstd: Vec<T> },
    Softmax { probs: Matrix<T> },
    Kron { gathered: Matrix<T>, pre_act: Matrix<T>, hidden_t: Matrix<T> },
}

fn same_shape<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(())
}

fn row_softmax<T: Scalar>(z: &Matrix<T>) -> Matrix<T> {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Evaluates one node given a lookup for its inputs' values.
pub(crate) fn evaluate<'v, T: Scalar>(
    op: &Op<T>,
    value_of: impl Fn(NodeId) -> &'v Matrix<T>,
) -> Result<(Matrix<T>, Cache<T>)> {
    let plain = |m: Matrix<T>| Ok((m, Cache::None));
    match op {
        Op::Leaf => Err(Error::Graph("leaf nodes are not evaluated".into())),
        Op::Matmul { a, b, transpose_b } => {
            let (a, b) = (value_of(*a), value_of(*b));
            if *transpose_b {
                plain(a.matmul(&b.transpose())?)
            } else {
                plain(a.matmul(b)?)
            }
        }
        Op::Add { a, b, broadcast } => {
            let (a, b) = (value_of(*a), value_of(*b));
            if *broadcast {
                plain(a.add_row_broadcast(b)?)
            } else {
                plain(a.add(b)?)
            }
        }
        Op::Mul { a, b } => plain(value_of(*a).hadamard(value_of(*b))?),
        Op::Scale { a, factor } => plain(value_of(*a).scale(*factor)),
        Op::ScaleBy { a, s } => {
            let s = value_of(*s);
            if s.shape() != (1, 1) {
                return Err(Error::dim("scale_by", "scale node must be 1x1"));
            }
            plain(value_of(*a).scale(s.get(0, 0)))
        }
        Op::Act { a, act } => plain(value_of(*a).map(|v| act.apply(v))),
        Op::Softmax { a } => {
            let probs = row_softmax(value_of(*a));
            Ok((probs.clone(), Cache::Softmax { probs }))
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, g, b) = (value_of(*x), value_of(*gain), value_of(*bias));
            let d = x.cols();
            if g.shape() != (1, d) || b.shape() != (1, d) {
                return Err(Error::dim("layer_norm", "gain and bias must be 1 x cols"));
            }
            let n = T::from_usize_lossy(d);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut xhat = x.clone();
            let mut rstd = Vec::with_capacity(x.rows());
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                let xh = xhat.row_mut(r);
                for v in xh.iter_mut() {
                    *v = (*v - mean) * rs;
                }
                let o = out.row_mut(r);
                for c in 0..d {
                    o[c] = xh[c] * g.data()[c] + b.data()[c];
                }
            }
            Ok((out, Cache::LayerNorm { xhat, rstd }))
        }
        Op::Embedding { table, indices } => {
            let t = value_of(*table);
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for (pos, &i) in indices.iter().enumerate() {
                if i >= t.rows() {
                    return Err(Error::TokenOutOfRange {
                        token: i,
                        position: pos,
                        vocab: t.rows(),
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            plain(Matrix::from_vec_unchecked(indices.len(), t.cols(), data))
        }
        Op::CrossEntropy { logits, labels } => {
            let z = value_of(*logits);
            if labels.len() != z.rows() {
                return Err(Error::dim("cross_entropy", "one label per row required"));
            }
            let probs = row_softmax(z);
            let mut total = T::zero();
            for (r, &y) in labels.iter().enumerate() {
                if y >= z.cols() {
                    return Err(Error::dim("cross_entropy", format!("label {y} >= {}", z.cols())));
                }
                let row = z.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - row[y];
            }
            let loss = total / T::from_usize_lossy(labels.len().max(1));
            Ok((Matrix::scalar(loss), Cache::Softmax { probs }))
        }
        Op::Mse { pred, target } => {
            let (p, t) = (value_of(*pred), value_of(*target));
            same_shape("mse", p, t)?;
            let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            plain(Matrix::scalar(total / T::from_usize_lossy(p.len().max(1))))
        }
        Op::Concat { parts, axis } => {
            let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| value_of(p)).collect();
            plain(concat(&mats, *axis)?)
        }
        Op::Slice { a, r0, c0, rows, cols } => plain(value_of(*a).block(*r0, *c0, *rows, *cols)?),
        Op::Sum { a } => plain(Matrix::scalar(value_of(*a).sum())),
        Op::KronLinear { x, a, b, mid_bias, act } => {
            let (x, a, b) = (value_of(*x), value_of(*a), value_of(*b));
            let n = x.rows();
            let (b1, _) = b.shape();
            let stages = kron_first_stage(x, a, b1)?;
            let mut pre_act = stages.first;
            if let Some(m) = mid_bias {
                let m = value_of(*m);
                if m.shape() != (b1, a.cols()) {
                    return Err(Error::dim(
                        "kron_linear",
                        format!("intermediate bias must be {b1}x{}", a.cols()),
                    ));
                }
                let block = m.data();
                for chunk in pre_act.data_mut().chunks_mut(block.len()) {
                    for (v, &bias) in chunk.iter_mut().zip(block) {
                        *v += bias;
                    }
                }
            }
            let hidden = if *act == Activation::None {
                pre_act.clone()
            } else {
                pre_act.map(|v| act.apply(v))
            };
            let (out, hidden_t) = kron_second_stage(&hidden, b, n);
            Ok((
                out,
                Cache::Kron {
                    gathered: stages.gathered,
                    pre_act,
                    hidden_t,
                },
            ))
        }
    }
}

pub(crate) fn concat<T: Scalar>(mats: &[&Matrix<T>], axis: Axis) -> Result<Matrix<T>> {
    let first = mats
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    match axis {
        Axis::Rows => {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for m in mats {
                if m.cols() != cols {
                    return Err(Error::dim("concat", "column counts differ"));
                }
                rows += m.rows();
                data.extend_from_slice(m.data());
            }
            Ok(Matrix::from_vec_unchecked(rows, cols, data))
        }
        Axis::Cols => {
            let rows = first.rows();
            if mats.iter().any(|m| m.rows() != rows) {
                return Err(Error::dim("concat", "row counts differ"));
            }
            let cols: usize = mats.iter().map(|m| m.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for m in mats {
                    data.extend_from_slice(m.row(r));
                }
            }
            Ok(Matrix::from_vec_unchecked(rows, cols, data))
        }
    }
}

/// Deliberate backward faults, used as negative controls for the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the `A` factor gradient of `kron_linear` by 1.5.
    KronLinearFactorA,
}

/// Gradients of one node's inputs, in the order of [`Op::inputs`].
pub(crate) fn local_backward<'v, T: Scalar>(
    op: &Op<T>,
    cache: &Cache<T>,
    out_value: &Matrix<T>,
    grad: &Matrix<T>,
    value_of: impl Fn(NodeId) -> &'v Matrix<T>,
    needs: impl Fn(NodeId) -> bool,
    fault: Option<Fault>,
) -> Vec<(NodeId, Matrix<T>)> {
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b, transpose_b } => {
            let (av, bv) = (value_of(*a), value_of(*b));
            if needs(*a) {
                let g = if *transpose_b {
                    grad.matmul(bv)
                } else {
                    grad.matmul(&bv.transpose())
                };
                out.push((*a, g.expect("shapes checked in forward")));
            }
            if needs(*b) {
                let g = if *transpose_b {
                    grad.transpose().matmul(av)
                } else {
                    av.transpose().matmul(grad)
                };
                out.push((*b, g.expect("shapes checked in forward")));
            }
        }
        Op::Add { a, b, broadcast } => {
            if needs(*a) {
                out.push((*a, grad.clone()));
            }
            if needs(*b) {
                out.push((*b, if *broadcast { grad.sum_rows() } else { grad.clone() }));
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                out.push((*a, grad.hadamard(value_of(*b)).expect("same shape")));
            }
            if needs(*b) {
                out.push((*b, grad.hadamard(value_of(*a)).expect("same shape")));
            }
        }
        Op::Scale { a, factor } => {
            if needs(*a) {
                out.push((*a, grad.scale(*factor)));
            }
        }
        Op::ScaleBy { a, s } => {
            let sv = value_of(*s).get(0, 0);
            if needs(*a) {
                out.push((*a, grad.scale(sv)));
            }
            if needs(*s) {
                let av = value_of(*a);
                let ds: T = grad.data().iter().zip(av.data()).map(|(&g, &x)| g * x).sum();
                out.push((*s, Matrix::scalar(ds)));
            }
        }
        Op::Act { a, act } => {
            if needs(*a) {
                let av = value_of(*a);
                let g = grad
                    .zip_map(av, "act_backward", |g, x| g * act.derivative(x))
                    .expect("same shape");
                out.push((*a, g));
            }
        }
        Op::Softmax { a } => {
            if needs(*a) {
                let mut g = grad.clone();
                for r in 0..out_value.rows() {
                    let y = out_value.row(r);
                    let dy = grad.row(r);
                    let dot: T = y.iter().zip(dy).map(|(&p, &q)| p * q).sum();
                    for ((gv, &p), &q) in g.row_mut(r).iter_mut().zip(y).zip(dy) {
                        *gv = p * (q - dot);
                    }
                }
                out.push((*a, g));
            }
        }
        Op::LayerNorm { x, gain, bias } => {
            let Cache::LayerNorm { xhat, rstd } = cache else {
                unreachable!("layer norm cache")
            };
            let gv = value_of(*gain);
            let d = xhat.cols();
            if needs(*x) {
                let n = T::from_usize_lossy(d);
                let mut dx = Matrix::zeros(xhat.rows(), d);
                for r in 0..xhat.rows() {
                    let xh = xhat.row(r);
                    let dy = grad.row(r);
                    let dxhat: Vec<T> = dy.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &dh), &h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                        *o = rstd[r] * (dh - mean_d - h * mean_dx);
                    }
                }
                out.push((*x, dx));
            }
            if needs(*gain) {
                out.push((*gain, grad.hadamard(xhat).expect("same shape").sum_rows()));
            }
            if needs(*bias) {
                out.push((*bias, grad.sum_rows()));
            }
        }
        Op::Embedding { table, indices } => {
            if needs(*table) {
                let t = value_of(*table);
                let mut g = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in g.row_mut(i).iter_mut().zip(grad.row(r)) {
                        *o += v;
                    }
                }
                out.push((*table, g));
            }
        }
        Op::CrossEntropy { logits, labels } => {
            if needs(*logits) {
                let Cache::Softmax { probs } = cache else {
                    unreachable!("cross entropy cache")
                };
                let upstream = grad.get(0, 0) / T::from_usize_lossy(labels.len().max(1));
                let mut g = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = g.row_mut(r);
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= upstream;
                    }
                }
                out.push((*logits, g));
            }
        }
        Op::Mse { pred, target } => {
            let (p, t) = (value_of(*pred), value_of(*target));
            let k = T::lit(2.0) * grad.get(0, 0) / T::from_usize_lossy(p.len().max(1));
            let dp = p.zip_map(t, "mse_backward", |a, b| k * (a - b)).expect("same shape");
            if needs(*target) {
                out.push((*target, dp.scale(-T::one())));
            }
            if needs(*pred) {
                out.push((*pred, dp));
            }
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = value_of(p).shape();
                let piece = match axis {
                    Axis::Rows => {
                        let b = grad.block(offset, 0, r, c);
                        offset += r;
                        b
                    }
                    Axis::Cols => {
                        let b = grad.block(0, offset, r, c);
                        offset += c;
                        b
                    }
                };
                if needs(p) {
                    out.push((p, piece.expect("within bounds")));
                }
            }
        }
        Op::Slice { a, r0, c0, rows, cols } => {
            if needs(*a) {
                let (ar, ac) = value_of(*a).shape();
                let mut g = Matrix::zeros(ar, ac);
                for r in 0..*rows {
                    g.row_mut(r0 + r)[*c0..c0 + cols].copy_from_slice(grad.row(r));
                }
                out.push((*a, g));
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                let (r, c) = value_of(*a).shape();
                out.push((*a, Matrix::filled(r, c, grad.get(0, 0))));
            }
        }
        Op::KronLinear { x, a, b, mid_bias, act } => {
            let Cache::Kron {
                gathered,
                pre_act,
                hidden_t,
            } = cache
            else {
                unreachable!("kron cache")
            };
            let (xv, av, bv) = (value_of(*x), value_of(*a), value_of(*b));
            let n = xv.rows();
            let (a1, a2) = av.shape();
            let (b1, b2) = bv.shape();
            // dY viewed as (n·a2)×b2 blocks
            let dy = grad.clone().reshaped(n * a2, b2).expect("output shape");
            if needs(*b) {
                let mut db = Matrix::zeros(b1, b2);
                let ht_t = hidden_t.transpose();
                gemm_acc(b1, n * a2, b2, ht_t.data(), dy.data(), db.data_mut());
                out.push((*b, db));
            }
            let wants_first = needs(*x) || needs(*a) || mid_bias.is_some_and(|m| needs(m));
            if !wants_first {
                return out;
            }
            let mut dht = Matrix::zeros(n * a2, b1);
            let bt = bv.transpose();
            gemm_acc(n * a2, b2, b1, dy.data(), bt.data(), dht.data_mut());
            let mut dz = block_transpose(&dht, n, a2, b1);
            if *act != Activation::None {
                for (g, &z) in dz.data_mut().iter_mut().zip(pre_act.data()) {
                    *g *= act.derivative(z);
                }
            }
            if let Some(m) = mid_bias {
                if needs(*m) {
                    let mut dm = Matrix::zeros(b1, a2);
                    for chunk in dz.data().chunks(b1 * a2) {
                        for (o, &v) in dm.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    out.push((*m, dm));
                }
            }
            if needs(*a) {
                let mut da = Matrix::zeros(a1, a2);
                let gt = gathered.transpose();
                gemm_acc(a1, n * b1, a2, gt.data(), dz.data(), da.data_mut());
                if fault == Some(Fault::KronLinearFactorA) {
                    da = da.scale(T::lit(1.5));
                }
                out.push((*a, da));
            }
            if needs(*x) {
                let mut dg = Matrix::zeros(n * b1, a1);
                let at = av.transpose();
                gemm_acc(n * b1, a2, a1, dz.data(), at.data(), dg.data_mut());
                out.push((*x, scatter_rows(&dg, n, a1, b1)));
            }
        }
    }
    out
}
