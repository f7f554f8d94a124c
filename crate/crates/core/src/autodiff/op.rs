//! Primitive operations and their forward rules.

use std::collections::BTreeMap;

use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AdError, Graph, NodeId, MASK_BIAS};

/// Primitive graph operation. Operand ids always precede the node itself.
#[derive(Clone)]
pub enum Op<S: Scalar> {
    Input { name: String },
    Param { name: String, value: Tensor<S> },
    Const(Tensor<S>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    MulColVec(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    ScaleConst(NodeId, S),
    AddConst(NodeId, S),
    ClampMin(NodeId, S),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        content_len: usize,
    },
    GatherRows {
        src: NodeId,
        indices: Vec<usize>,
    },
    Cholesky(NodeId),
    SolveLower {
        l: NodeId,
        b: NodeId,
    },
    SolveLowerT {
        l: NodeId,
        b: NodeId,
    },
    DiagPart(NodeId),
    PairwiseSqDist(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    BernoulliLogLik {
        f: NodeId,
        labels: Vec<u8>,
    },
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

impl<S: Scalar> Op<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::MulColVec(..) => "mul_col_vec",
            Op::MulScalar(..) => "mul_scalar",
            Op::ScaleConst(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::ClampMin(..) => "clamp_min",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows(_) => "layer_norm_rows",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::Cholesky(_) => "cholesky",
            Op::SolveLower { .. } => "solve_lower",
            Op::SolveLowerT { .. } => "solve_lower_t",
            Op::DiagPart(_) => "diag_part",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::SumRows(_) => "sum_rows",
            Op::BernoulliLogLik { .. } => "bernoulli_log_lik",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
        }
    }
}

/// Variance floor inside row-wise layer normalization.
pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow in either tail.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub(super) fn forward<S: Scalar>(
    graph: &Graph<S>,
    id: NodeId,
    op: &Op<S>,
    values: &[Tensor<S>],
    bindings: &BTreeMap<String, Tensor<S>>,
) -> Result<(Tensor<S>, Option<Vec<Tensor<S>>>), AdError> {
    let v = |i: NodeId| &values[i];
    let out = match op {
        Op::Input { name } => (bindings[name].clone(), None),
        Op::Param { value, .. } => (value.clone(), None),
        Op::Const(value) => (value.clone(), None),
        Op::MatMul(a, b) => (linalg::matmul(v(*a), v(*b)), None),
        Op::Transpose(a) => (linalg::transpose(v(*a)), None),
        Op::Add(a, b) => (v(*a).zip_map(v(*b), |x, y| x + y), None),
        Op::Sub(a, b) => (v(*a).zip_map(v(*b), |x, y| x - y), None),
        Op::Mul(a, b) => (v(*a).zip_map(v(*b), |x, y| x * y), None),
        Op::AddRowVec(a, vec) => (rows_zip(v(*a), v(*vec), |x, y| x + y), None),
        Op::MulRowVec(a, vec) => (rows_zip(v(*a), v(*vec), |x, y| x * y), None),
        Op::MulColVec(a, vec) => {
            let a = v(*a);
            let scales = v(*vec).data();
            let mut out = a.clone();
            for i in 0..a.rows() {
                let s = scales[i];
                for x in out.row_mut(i) {
                    *x = *x * s;
                }
            }
            (out, None)
        }
        Op::MulScalar(a, s) => {
            let c = v(*s).scalar_value();
            (v(*a).map(|x| x * c), None)
        }
        Op::ScaleConst(a, c) => (v(*a).map(|x| x * *c), None),
        Op::AddConst(a, c) => (v(*a).map(|x| x + *c), None),
        Op::ClampMin(a, c) => (v(*a).map(|x| x.max(*c)), None),
        Op::ConcatCols(parts) => (concat_cols(parts.iter().map(|&p| v(p))), None),
        Op::ConcatRows(parts) => (concat_rows(parts.iter().map(|&p| v(p))), None),
        Op::Exp(a) => (v(*a).map(|x| x.exp()), None),
        Op::Ln(a) => (v(*a).map(|x| x.ln()), None),
        Op::Sqrt(a) => (v(*a).map(|x| x.sqrt()), None),
        Op::Sigmoid(a) => (v(*a).map(sigmoid), None),
        Op::Relu(a) => (v(*a).map(|x| x.max(S::zero())), None),
        Op::SoftmaxRows(a) => (softmax_rows(v(*a)), None),
        Op::LayerNormRows(a) => (layer_norm_rows(v(*a)), None),
        Op::Attention {
            q,
            k,
            v: val,
            n_heads,
            content_len,
        } => {
            let (out, weights) = attention_forward(v(*q), v(*k), v(*val), *n_heads, *content_len);
            (out, Some(weights))
        }
        Op::GatherRows { src, indices } => {
            let src = v(*src);
            let d = src.cols();
            let mut data = Vec::with_capacity(indices.len() * d);
            for &r in indices {
                data.extend_from_slice(src.row(r));
            }
            (Tensor::new_unchecked(vec![indices.len(), d], data), None)
        }
        Op::Cholesky(a) => {
            let l = linalg::cholesky_factor(v(*a)).map_err(|e| match e {
                linalg::LinalgError::NotPositiveDefinite { index, pivot } => {
                    AdError::NotPositiveDefinite {
                        node: graph.describe(id),
                        index,
                        pivot,
                    }
                }
                other => AdError::Shape {
                    node: graph.describe(id),
                    detail: other.to_string(),
                },
            })?;
            (l, None)
        }
        Op::SolveLower { l, b } => (linalg::tri_solve_lower(v(*l), v(*b)), None),
        Op::SolveLowerT { l, b } => (linalg::tri_solve_lower_t(v(*l), v(*b)), None),
        Op::DiagPart(a) => {
            let a = v(*a);
            let n = a.rows();
            let data = (0..n).map(|i| a.at(i, i)).collect();
            (Tensor::new_unchecked(vec![n], data), None)
        }
        Op::PairwiseSqDist(a, b) => (linalg::pairwise_sq_dist(v(*a), v(*b)), None),
        Op::SumAll(a) => (Tensor::scalar(v(*a).sum()), None),
        Op::MeanAll(a) => {
            let t = v(*a);
            let n = S::of(t.len() as f64);
            (Tensor::scalar(t.sum() / n), None)
        }
        Op::SumRows(a) => {
            let a = v(*a);
            let data = (0..a.rows())
                .map(|i| a.row(i).iter().fold(S::zero(), |acc, &x| acc + x))
                .collect();
            (Tensor::new_unchecked(vec![a.rows()], data), None)
        }
        Op::BernoulliLogLik { f, labels } => {
            let f = v(*f);
            let mut out = f.clone();
            for i in 0..f.rows() {
                let y = S::of(labels[i] as f64);
                for x in out.row_mut(i) {
                    // y log σ(f) + (1-y) log(1-σ(f)) in log-sum-exp form.
                    *x = -softplus(-*x) - (S::one() - y) * *x;
                }
            }
            (out, None)
        }
        Op::CrossEntropyMean { logits, labels } => {
            let x = v(*logits);
            let n = x.rows();
            let mut total = S::zero();
            for i in 0..n {
                let row = x.row(i);
                let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let lse = max
                    + row
                        .iter()
                        .fold(S::zero(), |a, &b| a + (b - max).exp())
                        .ln();
                total = total + lse - row[labels[i]];
            }
            (Tensor::scalar(total / S::of(n as f64)), None)
        }
    };
    Ok(out)
}

fn rows_zip<S: Scalar>(a: &Tensor<S>, v: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let mut out = a.clone();
    let vec = v.data();
    for i in 0..a.rows() {
        for (x, &y) in out.row_mut(i).iter_mut().zip(vec) {
            *x = f(*x, y);
        }
    }
    out
}

fn concat_cols<'a, S: Scalar>(parts: impl Iterator<Item = &'a Tensor<S>> + Clone) -> Tensor<S> {
    let n = parts.clone().next().unwrap().rows();
    let total: usize = parts.clone().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts.clone() {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new_unchecked(vec![n, total], data)
}

fn concat_rows<'a, S: Scalar>(parts: impl Iterator<Item = &'a Tensor<S>> + Clone) -> Tensor<S> {
    let m = parts.clone().next().unwrap().cols();
    let total: usize = parts.clone().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(total * m);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new_unchecked(vec![total, m], data)
}

pub(super) fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn layer_norm_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let m = S::of(x.cols() as f64);
    let eps = S::of(LAYER_NORM_EPS);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().fold(S::zero(), |a, &b| a + b) / m;
        let var = row
            .iter()
            .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
            / m;
        let inv_sd = S::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_sd;
        }
    }
    out
}

/// Per-head `softmax(Q K^T / sqrt(d_h) + mask) V`, heads concatenated.
/// Returns the output and each head's attention weights for the backward
/// pass.
fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    n_heads: usize,
    content_len: usize,
) -> (Tensor<S>, Vec<Tensor<S>>) {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mask = S::of(MASK_BIAS);
    let mut out = Tensor::zeros(&[t, d]);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let c0 = h * dh;
        let mut scores = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let qrow = &q.row(i)[c0..c0 + dh];
            for j in 0..t {
                let krow = &k.row(j)[c0..c0 + dh];
                let mut s = S::zero();
                for (&a, &b) in qrow.iter().zip(krow) {
                    s = s + a * b;
                }
                let mut val = s * scale;
                if j >= content_len {
                    val = val + mask;
                }
                scores.set(i, j, val);
            }
        }
        let a = softmax_rows(&scores);
        for i in 0..t {
            let arow = a.row(i);
            for j in 0..t {
                let w = arow[j];
                if w == S::zero() {
                    continue;
                }
                let vrow = &v.row(j)[c0..c0 + dh];
                let orow = out.row_mut(i);
                for (o, &x) in orow[c0..c0 + dh].iter_mut().zip(vrow) {
                    *o = *o + w * x;
                }
            }
        }
        weights.push(a);
    }
    (out, weights)
}
