//! ARD radial-basis-function kernel over fused latent vectors, with batched
//! matrix assembly and jitter-based stabilization.
//!
//! `k(v, w) = exp(-1/2 * sum_k ((v_k - w_k) / l_k)^2)` with one lengthscale
//! per latent dimension. Lengthscales are stored as logs so positivity is
//! structural.

use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId};
use crate::linalg::{self, LinalgError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Base diagonal jitter applied before factorizing a kernel matrix.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Escalation ceiling: doubling stops once the jitter would exceed this.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {context}")]
    DimMismatch { context: String },
    #[error("kernel inputs must be non-empty")]
    Empty,
    #[error("lengthscales must be positive, got {value}")]
    NonPositiveLengthScale { value: f64 },
    #[error("irrecoverably singular kernel (jitter escalated to {last_jitter})")]
    IrrecoverablySingular { last_jitter: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-dimension lengthscales, log-parameterized.
#[derive(Debug, Clone)]
pub struct LengthScales<S> {
    log_l: Vec<S>,
}

impl<S: Scalar> LengthScales<S> {
    /// All lengthscales 1 (log 0), the training initialization.
    pub fn unit(dim: usize) -> Self {
        Self {
            log_l: vec![S::zero(); dim],
        }
    }

    pub fn from_values(values: &[S]) -> Result<Self, KernelError> {
        if let Some(&bad) = values.iter().find(|&&v| v <= S::zero()) {
            return Err(KernelError::NonPositiveLengthScale {
                value: bad.as_f64(),
            });
        }
        Ok(Self {
            log_l: values.iter().map(|v| v.ln()).collect(),
        })
    }

    pub fn from_log_values(log_l: Vec<S>) -> Self {
        Self { log_l }
    }

    pub fn log_values(&self) -> &[S] {
        &self.log_l
    }

    pub fn values(&self) -> Vec<S> {
        self.log_l.iter().map(|v| v.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_l.len()
    }
}

/// Kernel matrix plus the diagonal jitter baked into it.
#[derive(Debug, Clone)]
pub struct KernelMatrix<S> {
    pub values: Tensor<S>,
    pub jitter: S,
}

/// Pointwise ARD-RBF kernel; value in (0, 1], symmetric in its arguments.
pub fn rbf<S: Scalar>(v: &[S], w: &[S], ls: &LengthScales<S>) -> Result<S, KernelError> {
    if v.len() != w.len() || v.len() != ls.dim() {
        return Err(KernelError::DimMismatch {
            context: format!(
                "rbf over dims {} / {} with {} lengthscales",
                v.len(),
                w.len(),
                ls.dim()
            ),
        });
    }
    let half = S::of(0.5);
    let mut q = S::zero();
    for ((&a, &b), &log_l) in v.iter().zip(w).zip(ls.log_values()) {
        let scaled = (a - b) * (-log_l).exp();
        q = q + scaled * scaled;
    }
    Ok((-half * q).exp())
}

/// Kernel matrix between row sets: entry `(i, j) = rbf(V_i, W_j)`.
///
/// When `v` and `w` are the same rows the result is symmetric with unit
/// diagonal. No jitter is applied here.
pub fn kernel_matrix<S: Scalar>(
    v: &Tensor<S>,
    w: &Tensor<S>,
    ls: &LengthScales<S>,
) -> Result<KernelMatrix<S>, KernelError> {
    if v.rows() == 0 || w.rows() == 0 {
        return Err(KernelError::Empty);
    }
    if v.cols() != w.cols() || v.cols() != ls.dim() {
        return Err(KernelError::DimMismatch {
            context: format!(
                "kernel_matrix over dims {} / {} with {} lengthscales",
                v.cols(),
                w.cols(),
                ls.dim()
            ),
        });
    }
    let inv_l: Vec<S> = ls.log_values().iter().map(|&x| (-x).exp()).collect();
    let scale_rows = |t: &Tensor<S>| {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (x, &s) in out.row_mut(i).iter_mut().zip(&inv_l) {
                *x = *x * s;
            }
        }
        out
    };
    let vs = scale_rows(v);
    let ws = scale_rows(w);
    let half = S::of(0.5);
    let values = linalg::pairwise_sq_dist(&vs, &ws).map(|d| (-half * d).exp());
    Ok(KernelMatrix {
        values,
        jitter: S::zero(),
    })
}

/// `K + jitter * I`. Jitter accumulates in the returned matrix's field.
pub fn add_jitter<S: Scalar>(k: &KernelMatrix<S>, jitter: S) -> KernelMatrix<S> {
    let mut values = k.values.clone();
    let n = values.rows().min(values.cols());
    for i in 0..n {
        let v = values.at(i, i) + jitter;
        values.set(i, i, v);
    }
    KernelMatrix {
        values,
        jitter: k.jitter + jitter,
    }
}

/// Cholesky-factorize a kernel matrix, escalating jitter from
/// [`DEFAULT_JITTER`] by doubling up to [`MAX_JITTER`].
///
/// Returns the factor and the total jitter that made it succeed.
pub fn stabilized_cholesky<S: Scalar>(
    k: &KernelMatrix<S>,
) -> Result<(Tensor<S>, S), KernelError> {
    let mut jitter = S::of(DEFAULT_JITTER);
    let max = S::of(MAX_JITTER);
    loop {
        let candidate = add_jitter(k, jitter);
        match linalg::cholesky_factor(&candidate.values) {
            Ok(l) => return Ok((l, candidate.jitter)),
            Err(LinalgError::NotPositiveDefinite { .. }) => {
                let next = jitter * S::of(2.0);
                if next > max {
                    return Err(KernelError::IrrecoverablySingular {
                        last_jitter: jitter.as_f64(),
                    });
                }
                jitter = next;
            }
            Err(other) => return Err(other.into()),
        }
    }
}

/// Pick the jitter level that makes the current `K_ZZ` factorizable; used to
/// fix the jitter constant before building a differentiable graph around it.
pub fn choose_jitter<S: Scalar>(
    z: &Tensor<S>,
    ls: &LengthScales<S>,
) -> Result<S, KernelError> {
    let k_zz = kernel_matrix(z, z, ls)?;
    let (_, jitter) = stabilized_cholesky(&k_zz)?;
    Ok(jitter)
}

/// Graph-side kernel block: `exp(-1/2 ||a_i/l - b_j/l||^2)` with an optional
/// constant diagonal jitter, differentiable through both inputs and the
/// log-lengthscales node.
pub fn graph_kernel<S: Scalar>(
    g: &mut Graph<S>,
    a: NodeId,
    b: NodeId,
    log_l: NodeId,
    jitter: Option<S>,
) -> Result<NodeId, AdError> {
    let neg_log_l = g.scale(log_l, -S::one())?;
    let inv_l = g.exp(neg_log_l)?;
    let a_scaled = g.mul_row_vec(a, inv_l)?;
    let b_scaled = g.mul_row_vec(b, inv_l)?;
    let dist = g.pairwise_sq_dist(a_scaled, b_scaled)?;
    let scaled = g.scale(dist, -S::of(0.5))?;
    let k = g.exp(scaled)?;
    match jitter {
        Some(j) if j > S::zero() => {
            let n = g.shape(k)[0];
            let mut eye = Tensor::zeros(&[n, n]);
            for i in 0..n {
                eye.set(i, i, j);
            }
            let eye = g.constant(eye);
            g.add(k, eye)
        }
        _ => Ok(k),
    }
}
