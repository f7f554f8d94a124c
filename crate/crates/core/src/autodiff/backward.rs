//! Adjoint rules for every primitive.

use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::op::{sigmoid, Op};
use super::{AdError, Evaluation, Graph, NodeId};

/// Accumulate reverse-mode adjoints for all nodes up to `target`, which is
/// seeded with a unit scalar adjoint.
pub(super) fn run<S: Scalar>(
    graph: &Graph<S>,
    eval: &Evaluation<S>,
    target: NodeId,
) -> Result<Vec<Option<Tensor<S>>>, AdError> {
    let mut adj: Vec<Option<Tensor<S>>> = vec![None; graph.len()];
    adj[target] = Some(Tensor::scalar(S::one()));
    for id in (0..=target).rev() {
        let g = match adj[id].take() {
            Some(g) => g,
            None => continue,
        };
        if !g.all_finite() {
            return Err(AdError::NonFinite {
                node: graph.describe(id),
                phase: "backward",
            });
        }
        propagate(graph, eval, id, &g, &mut adj);
        adj[id] = Some(g);
    }
    Ok(adj)
}

fn acc<S: Scalar>(adj: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
    match &mut adj[id] {
        Some(t) => t.add_scaled(&delta, S::one()),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate<S: Scalar>(
    graph: &Graph<S>,
    eval: &Evaluation<S>,
    id: NodeId,
    g: &Tensor<S>,
    adj: &mut [Option<Tensor<S>>],
) {
    let val = |i: NodeId| &eval.values[i];
    match &graph.ops()[id] {
        Op::Input { .. } | Op::Param { .. } | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            acc(adj, *a, linalg::matmul_a_bt(g, val(*b)));
            acc(adj, *b, linalg::matmul_at_b(val(*a), g));
        }
        Op::Transpose(a) => acc(adj, *a, linalg::transpose(g)),
        Op::Add(a, b) => {
            acc(adj, *a, g.clone());
            acc(adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(adj, *a, g.clone());
            acc(adj, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            acc(adj, *a, g.zip_map(val(*b), |x, y| x * y));
            acc(adj, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::AddRowVec(a, v) => {
            acc(adj, *a, g.clone());
            acc(adj, *v, col_sums(g));
        }
        Op::MulRowVec(a, v) => {
            let vv = val(*v).data();
            let mut da = g.clone();
            for i in 0..da.rows() {
                for (x, &s) in da.row_mut(i).iter_mut().zip(vv) {
                    *x = *x * s;
                }
            }
            acc(adj, *a, da);
            let av = val(*a);
            let mut dv = vec![S::zero(); vv.len()];
            for i in 0..g.rows() {
                for ((d, &gx), &ax) in dv.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                    *d = *d + gx * ax;
                }
            }
            acc(adj, *v, Tensor::vector(dv));
        }
        Op::MulColVec(a, v) => {
            let scales = val(*v).data();
            let mut da = g.clone();
            for i in 0..da.rows() {
                let s = scales[i];
                for x in da.row_mut(i) {
                    *x = *x * s;
                }
            }
            acc(adj, *a, da);
            let av = val(*a);
            let dv: Vec<S> = (0..g.rows())
                .map(|i| {
                    g.row(i)
                        .iter()
                        .zip(av.row(i))
                        .fold(S::zero(), |acc, (&gx, &ax)| acc + gx * ax)
                })
                .collect();
            acc(adj, *v, Tensor::vector(dv));
        }
        Op::MulScalar(a, s) => {
            let c = val(*s).scalar_value();
            acc(adj, *a, g.map(|x| x * c));
            let dot = g
                .data()
                .iter()
                .zip(val(*a).data())
                .fold(S::zero(), |acc, (&gx, &ax)| acc + gx * ax);
            acc(adj, *s, Tensor::scalar(dot));
        }
        Op::ScaleConst(a, c) => {
            let c = *c;
            acc(adj, *a, g.map(|x| x * c));
        }
        Op::AddConst(a, _) => acc(adj, *a, g.clone()),
        Op::ClampMin(a, c) => {
            let c = *c;
            acc(adj, *a, g.zip_map(val(*a), |gx, ax| {
                if ax > c {
                    gx
                } else {
                    S::zero()
                }
            }));
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = eval.values[p].cols();
                let n = eval.values[p].rows();
                let mut slice = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    slice
                        .row_mut(i)
                        .copy_from_slice(&g.row(i)[start..start + w]);
                }
                acc(adj, p, slice);
                start += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = eval.values[p].rows();
                let m = eval.values[p].cols();
                let mut slice = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    slice.row_mut(i).copy_from_slice(g.row(start + i));
                }
                acc(adj, p, slice);
                start += n;
            }
        }
        Op::Exp(a) => acc(adj, *a, g.zip_map(val(id), |gx, y| gx * y)),
        Op::Ln(a) => acc(adj, *a, g.zip_map(val(*a), |gx, x| gx / x)),
        Op::Sqrt(a) => {
            let half = S::of(0.5);
            acc(adj, *a, g.zip_map(val(id), |gx, y| gx * half / y));
        }
        Op::Sigmoid(a) => acc(
            adj,
            *a,
            g.zip_map(val(id), |gx, y| gx * y * (S::one() - y)),
        ),
        Op::Relu(a) => acc(adj, *a, g.zip_map(val(*a), |gx, x| {
            if x > S::zero() {
                gx
            } else {
                S::zero()
            }
        })),
        Op::SoftmaxRows(a) => {
            let y = val(id);
            let mut da = g.clone();
            for i in 0..y.rows() {
                let yrow = y.row(i);
                let grow = da.row_mut(i);
                let dot = grow
                    .iter()
                    .zip(yrow)
                    .fold(S::zero(), |acc, (&gx, &yx)| acc + gx * yx);
                for (d, &yx) in grow.iter_mut().zip(yrow) {
                    *d = yx * (*d - dot);
                }
            }
            acc(adj, *a, da);
        }
        Op::LayerNormRows(a) => {
            let x = val(*a);
            let y = val(id);
            let m = S::of(x.cols() as f64);
            let eps = S::of(super::op::LAYER_NORM_EPS);
            let mut da = g.clone();
            for i in 0..x.rows() {
                let xrow = x.row(i);
                let yrow = y.row(i);
                let mean = xrow.iter().fold(S::zero(), |a, &b| a + b) / m;
                let var = xrow
                    .iter()
                    .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                    / m;
                let inv_sd = S::one() / (var + eps).sqrt();
                let grow = da.row_mut(i);
                let g_mean = grow.iter().fold(S::zero(), |a, &b| a + b) / m;
                let gy_mean = grow
                    .iter()
                    .zip(yrow)
                    .fold(S::zero(), |a, (&gx, &yx)| a + gx * yx)
                    / m;
                for (d, &yx) in grow.iter_mut().zip(yrow) {
                    *d = inv_sd * (*d - g_mean - yx * gy_mean);
                }
            }
            acc(adj, *a, da);
        }
        Op::Attention {
            q,
            k,
            v,
            n_heads,
            content_len: _,
        } => {
            let weights = eval.attn_cache[id]
                .as_ref()
                .expect("attention cache missing");
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (t, d) = (qv.rows(), qv.cols());
            let dh = d / n_heads;
            let scale = S::one() / S::of(dh as f64).sqrt();
            let mut dq = Tensor::zeros(&[t, d]);
            let mut dk = Tensor::zeros(&[t, d]);
            let mut dv = Tensor::zeros(&[t, d]);
            for h in 0..*n_heads {
                let c0 = h * dh;
                let a = &weights[h];
                // dV_h = A^T dO_h ; dA = dO_h V_h^T
                let mut da = Tensor::zeros(&[t, t]);
                for i in 0..t {
                    let grow = &g.row(i)[c0..c0 + dh];
                    let arow = a.row(i);
                    for j in 0..t {
                        let w = arow[j];
                        if w != S::zero() {
                            let dvrow = dv.row_mut(j);
                            for (dst, &gx) in dvrow[c0..c0 + dh].iter_mut().zip(grow) {
                                *dst = *dst + w * gx;
                            }
                        }
                        let vrow = &vv.row(j)[c0..c0 + dh];
                        let mut s = S::zero();
                        for (&gx, &vx) in grow.iter().zip(vrow) {
                            s = s + gx * vx;
                        }
                        da.set(i, j, s);
                    }
                }
                // dS = A ∘ (dA - rowsum(dA ∘ A)); additive mask has no gradient.
                let mut ds = da;
                for i in 0..t {
                    let arow = a.row(i);
                    let dsrow = ds.row_mut(i);
                    let dot = dsrow
                        .iter()
                        .zip(arow)
                        .fold(S::zero(), |acc, (&dx, &ax)| acc + dx * ax);
                    for (dx, &ax) in dsrow.iter_mut().zip(arow) {
                        *dx = ax * (*dx - dot);
                    }
                }
                // dQ_h = scale * dS K_h ; dK_h = scale * dS^T Q_h
                for i in 0..t {
                    let dsrow = ds.row(i);
                    for j in 0..t {
                        let w = dsrow[j] * scale;
                        if w == S::zero() {
                            continue;
                        }
                        let krow = &kv.row(j)[c0..c0 + dh];
                        let dqrow = dq.row_mut(i);
                        for (dst, &kx) in dqrow[c0..c0 + dh].iter_mut().zip(krow) {
                            *dst = *dst + w * kx;
                        }
                        let qrow = &qv.row(i)[c0..c0 + dh];
                        let dkrow = dk.row_mut(j);
                        for (dst, &qx) in dkrow[c0..c0 + dh].iter_mut().zip(qrow) {
                            *dst = *dst + w * qx;
                        }
                    }
                }
            }
            acc(adj, *q, dq);
            acc(adj, *k, dk);
            acc(adj, *v, dv);
        }
        Op::GatherRows { src, indices } => {
            let d = eval.values[*src].cols();
            let n = eval.values[*src].rows();
            let mut ds = Tensor::zeros(&[n, d]);
            for (r, &i) in indices.iter().enumerate() {
                let grow = g.row(r);
                for (dst, &gx) in ds.row_mut(i).iter_mut().zip(grow) {
                    *dst = *dst + gx;
                }
            }
            acc(adj, *src, ds);
        }
        Op::Cholesky(a) => {
            // Σ̄ = ½ (X + X^T) with X = L^{-T} Φ(L^T L̄) L^{-1}, where Φ keeps
            // the lower triangle and halves the diagonal. Uses triangular
            // solves only — no explicit inverse.
            let l = val(id);
            let n = l.rows();
            let mut p = linalg::matmul_at_b(l, g);
            let half = S::of(0.5);
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        p.set(i, j, S::zero());
                    } else if i == j {
                        let v = p.at(i, i) * half;
                        p.set(i, i, v);
                    }
                }
            }
            let y = linalg::tri_solve_lower_t(l, &p);
            let x = linalg::transpose(&linalg::tri_solve_lower_t(l, &linalg::transpose(&y)));
            let mut sym = x.clone();
            for i in 0..n {
                for j in 0..n {
                    sym.set(i, j, (x.at(i, j) + x.at(j, i)) * half);
                }
            }
            acc(adj, *a, sym);
        }
        Op::SolveLower { l, b } => {
            let x = val(id);
            let lv = val(*l);
            let db = linalg::tri_solve_lower_t(lv, g);
            let dl = tril_neg_abt(&db, x);
            acc(adj, *b, db);
            acc(adj, *l, dl);
        }
        Op::SolveLowerT { l, b } => {
            let x = val(id);
            let lv = val(*l);
            let db = linalg::tri_solve_lower(lv, g);
            let dl = tril_neg_abt(x, &db);
            acc(adj, *b, db);
            acc(adj, *l, dl);
        }
        Op::DiagPart(a) => {
            let n = g.len();
            let mut da = Tensor::zeros(&[n, n]);
            for i in 0..n {
                da.set(i, i, g.data()[i]);
            }
            acc(adj, *a, da);
        }
        Op::PairwiseSqDist(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let two = S::of(2.0);
            let mut da = Tensor::zeros(&[av.rows(), av.cols()]);
            let mut db = Tensor::zeros(&[bv.rows(), bv.cols()]);
            for i in 0..av.rows() {
                let arow = av.row(i);
                let grow = g.row(i);
                for j in 0..bv.rows() {
                    let gx = grow[j];
                    if gx == S::zero() {
                        continue;
                    }
                    let brow = bv.row(j);
                    let darow = da.row_mut(i);
                    for (k, (&ax, &bx)) in arow.iter().zip(brow).enumerate() {
                        darow[k] = darow[k] + two * gx * (ax - bx);
                    }
                    let dbrow = db.row_mut(j);
                    for (k, (&ax, &bx)) in arow.iter().zip(brow).enumerate() {
                        dbrow[k] = dbrow[k] - two * gx * (ax - bx);
                    }
                }
            }
            acc(adj, *a, da);
            acc(adj, *b, db);
        }
        Op::SumAll(a) => {
            let gx = g.scalar_value();
            acc(adj, *a, Tensor::filled(eval.values[*a].shape(), gx));
        }
        Op::MeanAll(a) => {
            let len = S::of(eval.values[*a].len() as f64);
            let gx = g.scalar_value() / len;
            acc(adj, *a, Tensor::filled(eval.values[*a].shape(), gx));
        }
        Op::SumRows(a) => {
            let src = val(*a);
            let mut da = Tensor::zeros(&[src.rows(), src.cols()]);
            for i in 0..src.rows() {
                let gx = g.data()[i];
                for x in da.row_mut(i) {
                    *x = gx;
                }
            }
            acc(adj, *a, da);
        }
        Op::BernoulliLogLik { f, labels } => {
            let fv = val(*f);
            let mut df = g.clone();
            for i in 0..fv.rows() {
                let y = S::of(labels[i] as f64);
                for (d, &fx) in df.row_mut(i).iter_mut().zip(fv.row(i)) {
                    *d = *d * (y - sigmoid(fx));
                }
            }
            acc(adj, *f, df);
        }
        Op::CrossEntropyMean { logits, labels } => {
            let x = val(*logits);
            let n = x.rows();
            let gx = g.scalar_value() / S::of(n as f64);
            let mut dx = super::op::softmax_rows(x);
            for i in 0..n {
                let row = dx.row_mut(i);
                row[labels[i]] = row[labels[i]] - S::one();
                for v in row.iter_mut() {
                    *v = *v * gx;
                }
            }
            acc(adj, *logits, dx);
        }
    }
}

fn col_sums<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let mut sums = vec![S::zero(); g.cols()];
    for i in 0..g.rows() {
        for (s, &gx) in sums.iter_mut().zip(g.row(i)) {
            *s = *s + gx;
        }
    }
    Tensor::vector(sums)
}

/// `-tril(A B^T)`: the triangular-factor adjoint shared by both solves.
fn tril_neg_abt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut m = linalg::matmul_a_bt(a, b);
    let n = m.rows();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                m.set(i, j, S::zero());
            } else {
                let v = -m.at(i, j);
                m.set(i, j, v);
            }
        }
    }
    m
}
