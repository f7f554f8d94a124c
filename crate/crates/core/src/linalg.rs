//! Hand-rolled dense linear algebra shared by the autodiff engine, the
//! kernel stack and the GP head: Cholesky factorization, triangular solves,
//! pairwise squared distances and a two-eigenpair power iteration.
//!
//! Everything here is also reachable from inside computation-graph nodes, so
//! the routines stay allocation-light and fully deterministic.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative pivot floor: a pivot below `max_diag * PIVOT_RTOL` is treated as
/// a factorization failure rather than silently taking sqrt of noise.
const PIVOT_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("eigen iteration did not converge after {iterations} iterations")]
    EigenNoConvergence { iterations: usize },
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// The input is read symmetrically (off-diagonal pairs are averaged), so
/// matrices that are symmetric only up to roundoff are handled uniformly.
pub fn cholesky_factor<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    let n = square_dim(a)?;
    let mut l = Tensor::zeros(&[n, n]);
    let mut max_diag = S::zero();
    for i in 0..n {
        max_diag = max_diag.max(a.at(i, i).abs());
    }
    let floor = max_diag * S::of(PIVOT_RTOL);
    let half = S::of(0.5);
    for i in 0..n {
        for j in 0..=i {
            let aij = (a.at(i, j) + a.at(j, i)) * half;
            let mut s = aij;
            for k in 0..j {
                s = s - l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if s <= floor {
                    return Err(LinalgError::NotPositiveDefinite {
                        index: i,
                        pivot: s.as_f64(),
                    });
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`; `b` may have multiple columns.
pub fn tri_solve_lower<S: Scalar>(l: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = l.rows();
    let (rows, cols) = rhs_dims(b);
    debug_assert_eq!(rows, n);
    let mut x = b.clone();
    for c in 0..cols {
        for i in 0..n {
            let mut s = x.data()[i * cols + c];
            for k in 0..i {
                s = s - l.at(i, k) * x.data()[k * cols + c];
            }
            x.data_mut()[i * cols + c] = s / l.at(i, i);
        }
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L` (back substitution).
pub fn tri_solve_lower_t<S: Scalar>(l: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = l.rows();
    let (rows, cols) = rhs_dims(b);
    debug_assert_eq!(rows, n);
    let mut x = b.clone();
    for c in 0..cols {
        for i in (0..n).rev() {
            let mut s = x.data()[i * cols + c];
            for k in i + 1..n {
                s = s - l.at(k, i) * x.data()[k * cols + c];
            }
            x.data_mut()[i * cols + c] = s / l.at(i, i);
        }
    }
    x
}

/// Solve `K x = b` for SPD `K` through its Cholesky factor.
pub fn cholesky_solve<S: Scalar>(k: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    let l = cholesky_factor(k)?;
    Ok(tri_solve_lower_t(&l, &tri_solve_lower(&l, b)))
}

/// `C = A B` for 2-D tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    debug_assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `C = A^T B`.
pub fn matmul_at_b<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, n) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    debug_assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[n, m]);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `C = A B^T`.
pub fn matmul_a_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    debug_assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            *o = s;
        }
    }
    out
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..n {
        for j in 0..m {
            out.set(j, i, a.at(i, j));
        }
    }
    out
}

/// `D[i][j] = sum_k (a[i][k] - b[j][k])^2`.
pub fn pairwise_sq_dist<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, d) = (a.rows(), a.cols());
    let m = b.rows();
    debug_assert_eq!(d, b.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                let diff = av - bv;
                s = s + diff * diff;
            }
            *o = s;
        }
    }
    out
}

/// Largest absolute asymmetry `max |A - A^T|` of a square matrix.
pub fn max_asymmetry<S: Scalar>(a: &Tensor<S>) -> S {
    let n = a.rows();
    let mut worst = S::zero();
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst
}

/// Leading two eigenpairs of a symmetric matrix by power iteration with
/// deflation. Returns `(lambda1, v1, lambda2, v2)` with unit-norm vectors.
pub fn top_two_eigen<S: Scalar>(
    a: &Tensor<S>,
    max_iter: usize,
    tol: f64,
) -> Result<(S, Vec<S>, S, Vec<S>), LinalgError> {
    let n = square_dim(a)?;
    let (l1, v1) = power_iterate(a, None, n, max_iter, tol)?;
    let (l2, v2) = power_iterate(a, Some((l1, &v1)), n, max_iter, tol)?;
    Ok((l1, v1, l2, v2))
}

/// Second eigenpair when the leading one is known analytically (e.g. the
/// normalized-kernel eigenvector `D^{1/2} 1` with eigenvalue 1). Avoids
/// iterating for a leading vector that may sit in a degenerate eigenspace.
pub fn second_eigen_with_known_first<S: Scalar>(
    a: &Tensor<S>,
    lambda1: S,
    v1: &[S],
    max_iter: usize,
    tol: f64,
) -> Result<(S, Vec<S>), LinalgError> {
    let n = square_dim(a)?;
    debug_assert_eq!(v1.len(), n);
    let v1 = v1.to_vec();
    power_iterate(a, Some((lambda1, &v1)), n, max_iter, tol)
}

fn power_iterate<S: Scalar>(
    a: &Tensor<S>,
    deflate: Option<(S, &Vec<S>)>,
    n: usize,
    max_iter: usize,
    tol: f64,
) -> Result<(S, Vec<S>), LinalgError> {
    // Deterministic start vector with no special alignment.
    let mut v: Vec<S> = (0..n)
        .map(|i| S::of(((i * 2654435761 + 104729) % 1000) as f64 / 1000.0 - 0.5 + 1e-3))
        .collect();
    normalize(&mut v);
    let mut lambda = S::zero();
    for _ in 0..max_iter {
        let mut w = mat_vec(a, &v);
        if let Some((l1, v1)) = deflate {
            let proj = dot(v1, &w);
            for (wi, &v1i) in w.iter_mut().zip(v1.iter()) {
                *wi = *wi - l1 * proj * v1i;
            }
            // Re-orthogonalize against the leading eigenvector.
            let proj2 = dot(v1, &w);
            for (wi, &v1i) in w.iter_mut().zip(v1.iter()) {
                *wi = *wi - proj2 * v1i;
            }
        }
        let new_lambda = dot(&v, &w);
        let norm = normalize(&mut w);
        if norm == S::zero() {
            // Deflated operator annihilated the iterate: eigenvalue 0.
            return Ok((S::zero(), v));
        }
        let delta = (new_lambda - lambda).abs().as_f64();
        let scale = new_lambda.abs().as_f64().max(1.0);
        v = w;
        lambda = new_lambda;
        if delta <= tol * scale {
            return Ok((lambda, v));
        }
    }
    Err(LinalgError::EigenNoConvergence {
        iterations: max_iter,
    })
}

fn mat_vec<S: Scalar>(a: &Tensor<S>, v: &[S]) -> Vec<S> {
    let n = a.rows();
    (0..n).map(|i| dot(a.row(i), v)).collect()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn normalize<S: Scalar>(v: &mut [S]) -> S {
    let norm = dot(v, v).sqrt();
    if norm > S::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

fn square_dim<S: Scalar>(a: &Tensor<S>) -> Result<usize, LinalgError> {
    if a.rank() != 2 || a.rows() != a.cols() {
        let (rows, cols) = if a.rank() == 2 {
            (a.rows(), a.cols())
        } else {
            (a.len(), 1)
        };
        return Err(LinalgError::NotSquare { rows, cols });
    }
    Ok(a.rows())
}

fn rhs_dims<S: Scalar>(b: &Tensor<S>) -> (usize, usize) {
    match b.shape() {
        [n, m] => (*n, *m),
        [n] => (*n, 1),
        other => panic!("triangular solve rhs of rank {}", other.len()),
    }
}
