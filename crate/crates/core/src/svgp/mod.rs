//! Sparse variational Gaussian-process classification: inducing-point prior,
//! conditional signal distribution, mean-field variational family, analytic
//! Gaussian KL and the Monte-Carlo ELBO.

mod elbo;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use elbo::{
    build_elbo_graph, elbo_on_latents, graph_elbo_on_latents, ElboConfig, ElboNodes, MeanNodes,
};

use crate::autodiff::{softplus, AdError};
use crate::kernel::{self, KernelError, LengthScales};
use crate::linalg::{self, LinalgError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive floor under the conditional variance before taking its square
/// root for reparameterized sampling.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvgpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("dimension mismatch: {context}")]
    DimMismatch { context: String },
    #[error("non-finite ELBO estimate")]
    NonFiniteElbo,
}

/// Variational mean of `q(u)`: either the paper's `Z alpha` coupling or a
/// free per-inducing-point vector.
#[derive(Debug, Clone)]
pub enum VariationalMean<S> {
    /// `mean(u) = Z alpha` with `alpha` a `[D, 1]` coefficient vector.
    ZAlpha(Tensor<S>),
    /// Free `[M, 1]` mean vector.
    Free(Tensor<S>),
}

/// Inducing locations plus the mean-field variational family
/// `q(u) = N(mean, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct VariationalState<S> {
    /// `[M, D]` inducing locations in the fused latent space.
    pub z: Tensor<S>,
    pub mean: VariationalMean<S>,
    /// Log of the shared diagonal variance, so `sigma^2 > 0` structurally.
    pub log_sigma2: S,
}

impl<S: Scalar> VariationalState<S> {
    pub fn inducing_count(&self) -> usize {
        self.z.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn sigma2(&self) -> S {
        self.log_sigma2.exp()
    }

    /// Variational mean vector as `[M, 1]`.
    pub fn mean_u(&self) -> Tensor<S> {
        match &self.mean {
            VariationalMean::ZAlpha(alpha) => linalg::matmul(&self.z, alpha),
            VariationalMean::Free(m) => m.clone(),
        }
    }
}

/// Gaussian over the signal values `f` at a set of latent points.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian<S> {
    /// `[N]` conditional mean.
    pub mean: Tensor<S>,
    /// `[N, N]` conditional covariance, diagonal clamped at >= 0.
    pub covariance: Tensor<S>,
}

impl<S: Scalar> ConditionalGaussian<S> {
    pub fn variance_diag(&self) -> Vec<S> {
        let n = self.mean.len();
        (0..n).map(|i| self.covariance.at(i, i)).collect()
    }
}

/// Monte-Carlo ELBO estimate and its decomposition.
#[derive(Debug, Clone)]
pub struct ElboEstimate<S> {
    /// `likelihood_term - kl_term`.
    pub value: S,
    pub likelihood_term: S,
    pub kl_term: S,
    pub n_samples: usize,
    /// Per-sample batch log-likelihood sums (before the `P/|batch|` scale),
    /// for Monte-Carlo standard-error estimates.
    pub per_sample_loglik: Vec<S>,
}

/// Signal distribution at latents `v` conditioned on inducing values `u`:
/// mean `K_vz K_zz^{-1} u`, covariance `K_vv - K_vz K_zz^{-1} K_zv`.
///
/// `K_zz` receives escalating jitter before factorization; the `K_vv` block
/// does not, so exact interpolation at `z = v` is preserved.
pub fn conditional_f_given_u<S: Scalar>(
    v: &Tensor<S>,
    u: &Tensor<S>,
    z: &Tensor<S>,
    lengthscales: &LengthScales<S>,
) -> Result<ConditionalGaussian<S>, SvgpError> {
    let m = z.rows();
    if u.len() != m {
        return Err(SvgpError::DimMismatch {
            context: format!("u has {} entries for {} inducing points", u.len(), m),
        });
    }
    let n = v.rows();
    let k_vz = kernel::kernel_matrix(v, z, lengthscales)?.values;
    let k_zz = kernel::kernel_matrix(z, z, lengthscales)?;
    let (l, _jitter) = kernel::stabilized_cholesky(&k_zz)?;

    let u_col = Tensor::from_vec(vec![m, 1], u.data().to_vec()).expect("finite u");
    let kzz_inv_u = linalg::tri_solve_lower_t(&l, &linalg::tri_solve_lower(&l, &u_col));
    let mean_col = linalg::matmul(&k_vz, &kzz_inv_u);
    let mean = Tensor::vector(mean_col.data().to_vec());

    let k_zv = linalg::transpose(&k_vz);
    let kzz_inv_kzv = linalg::tri_solve_lower_t(&l, &linalg::tri_solve_lower(&l, &k_zv));
    let k_vv = kernel::kernel_matrix(v, v, lengthscales)?.values;
    let mut covariance = k_vv;
    let q = linalg::matmul(&k_vz, &kzz_inv_kzv);
    for i in 0..n {
        for j in 0..n {
            let val = covariance.at(i, j) - q.at(i, j);
            covariance.set(i, j, val);
        }
    }
    for i in 0..n {
        let val = covariance.at(i, i).max(S::zero());
        covariance.set(i, i, val);
    }
    Ok(ConditionalGaussian { mean, covariance })
}

/// Draw `B` reparameterized samples `u = mean + sigma * eps` from `q(u)`,
/// returned as columns of an `[M, B]` tensor.
pub fn sample_q_u<S: Scalar>(state: &VariationalState<S>, b: usize, seed: u64) -> Tensor<S> {
    assert!(b >= 1, "need at least one sample");
    let m = state.inducing_count();
    let mean = state.mean_u();
    let sigma = (state.log_sigma2 * S::of(0.5)).exp();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(&[m, b]);
    for i in 0..m {
        let mu = mean.data()[i];
        for j in 0..b {
            let eps: f64 = StandardNormal.sample(&mut rng);
            out.set(i, j, mu + sigma * S::of(eps));
        }
    }
    out
}

/// Analytic KL between `q(u) = N(mean, sigma^2 I)` and the inducing prior
/// `p(u) = N(0, K_zz)`:
/// `1/2 [sigma^2 tr(K^-1) + mean^T K^-1 mean - M + log det K - M log sigma^2]`.
///
/// `k_zz` must already carry its stabilizing jitter.
pub fn kl_q_p<S: Scalar>(
    state: &VariationalState<S>,
    k_zz: &Tensor<S>,
) -> Result<S, SvgpError> {
    let m = state.inducing_count();
    if k_zz.rows() != m || k_zz.cols() != m {
        return Err(SvgpError::DimMismatch {
            context: format!(
                "K_zz is {}x{} for {} inducing points",
                k_zz.rows(),
                k_zz.cols(),
                m
            ),
        });
    }
    let l = linalg::cholesky_factor(k_zz)?;
    let l_inv = linalg::tri_solve_lower(&l, &Tensor::identity(m));
    let trace_kinv = l_inv.data().iter().fold(S::zero(), |a, &x| a + x * x);
    let mean = state.mean_u();
    let w = linalg::tri_solve_lower(&l, &mean);
    let quad = w.data().iter().fold(S::zero(), |a, &x| a + x * x);
    let log_det = (0..m).fold(S::zero(), |a, i| a + l.at(i, i).ln()) * S::of(2.0);
    let m_s = S::of(m as f64);
    let half = S::of(0.5);
    Ok(half * (state.sigma2() * trace_kinv + quad - m_s + log_det - m_s * state.log_sigma2))
}

/// Stable Bernoulli log-likelihood `y log σ(f) + (1-y) log(1-σ(f))`.
pub fn bernoulli_log_lik<S: Scalar>(y: u8, f: S) -> S {
    debug_assert!(y <= 1);
    let one_minus_y = S::of((1 - y) as f64);
    -softplus(-f) - one_minus_y * f
}

#[cfg(test)]
mod tests;
