//! Monte-Carlo ELBO: a numeric estimator and a fully differentiable graph
//! builder that share the same reparameterization noise, so the two routes
//! can be cross-checked exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AdError, Graph, NodeId};
use crate::kernel::{self, graph_kernel, LengthScales};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{
    bernoulli_log_lik, kl_q_p, ElboEstimate, SvgpError, VariationalMean, VariationalState,
    VARIANCE_FLOOR,
};

/// Monte-Carlo and scaling configuration for one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboConfig {
    /// Number of reparameterized samples `B`.
    pub n_samples: usize,
    /// Total training-set size `P` for the `P / |batch|` likelihood scale.
    pub total_count: usize,
    /// Seed for the sampling noise.
    pub seed: u64,
}

/// Node handles of an in-graph ELBO.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub elbo: NodeId,
    pub likelihood: NodeId,
    pub kl: NodeId,
}

/// Variational-mean parameter nodes inside a graph.
#[derive(Debug, Clone, Copy)]
pub enum MeanNodes {
    /// `[D, 1]` coefficient node; mean is `Z alpha`.
    Alpha(NodeId),
    /// `[M, 1]` free mean node.
    Free(NodeId),
}

/// Reparameterization noise shared by the numeric and graph ELBO routes:
/// `eps_u` is `[M, B]` for the `u` draw, `eps_f` is `[N, B]` for the
/// conditional marginals.
pub(crate) fn draw_noise<S: Scalar>(
    m: usize,
    n: usize,
    b: usize,
    seed: u64,
) -> (Tensor<S>, Tensor<S>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                S::of(x)
            })
            .collect();
        Tensor::new_unchecked(vec![rows, cols], data)
    };
    let eps_u = draw(m, b);
    let eps_f = draw(n, b);
    (eps_u, eps_f)
}

/// Numeric Monte-Carlo ELBO on fixed latent vectors.
///
/// `likelihood_term = (P/|batch|) * (1/B) * Σ_j Σ_i log p(y_i | f_i^(j))`
/// with `f^(j)` drawn through `q(u)` and the conditional marginals, and
/// `value = likelihood_term - KL[q(u) || p(u)]`.
pub fn elbo_on_latents<S: Scalar>(
    latents: &Tensor<S>,
    labels: &[u8],
    state: &VariationalState<S>,
    lengthscales: &LengthScales<S>,
    config: ElboConfig,
) -> Result<ElboEstimate<S>, SvgpError> {
    let n = latents.rows();
    let m = state.inducing_count();
    let b = config.n_samples;
    assert!(b >= 1, "need at least one sample");
    if labels.len() != n {
        return Err(SvgpError::DimMismatch {
            context: format!("{} labels for {} latents", labels.len(), n),
        });
    }

    let k_zz = kernel::kernel_matrix(&state.z, &state.z, lengthscales)?;
    let (l, jitter) = kernel::stabilized_cholesky(&k_zz)?;
    let k_zz_jittered = kernel::add_jitter(&k_zz, jitter);
    let k_vz = kernel::kernel_matrix(latents, &state.z, lengthscales)?.values;

    let (eps_u, eps_f) = draw_noise::<S>(m, n, b, config.seed);
    let mean_u = state.mean_u();
    let sigma = (state.log_sigma2 * S::of(0.5)).exp();
    let mut u = eps_u;
    for i in 0..m {
        let mu = mean_u.data()[i];
        for x in u.row_mut(i) {
            *x = mu + sigma * *x;
        }
    }

    // Conditional marginals: mean K_vz K_zz^{-1} u, variance 1 - q_ii.
    let kzz_inv_u = linalg::tri_solve_lower_t(&l, &linalg::tri_solve_lower(&l, &u));
    let f_mean = linalg::matmul(&k_vz, &kzz_inv_u);
    let k_zv = linalg::transpose(&k_vz);
    let kzz_inv_kzv = linalg::tri_solve_lower_t(&l, &linalg::tri_solve_lower(&l, &k_zv));
    let sd: Vec<S> = (0..n)
        .map(|i| {
            let mut q = S::zero();
            for (p, &kv) in k_vz.row(i).iter().enumerate() {
                q = q + kv * kzz_inv_kzv.at(p, i);
            }
            let var = (S::one() - q).max(S::zero());
            (var + S::of(VARIANCE_FLOOR)).sqrt()
        })
        .collect();

    let mut per_sample_loglik = vec![S::zero(); b];
    for i in 0..n {
        let y = labels[i];
        let sd_i = sd[i];
        let mrow = f_mean.row(i);
        let erow = eps_f.row(i);
        for j in 0..b {
            let f = mrow[j] + sd_i * erow[j];
            per_sample_loglik[j] = per_sample_loglik[j] + bernoulli_log_lik(y, f);
        }
    }

    let scale = S::of(config.total_count as f64 / n as f64);
    let mean_loglik =
        per_sample_loglik.iter().fold(S::zero(), |a, &x| a + x) / S::of(b as f64);
    let likelihood_term = scale * mean_loglik;
    let kl_term = kl_q_p(state, &k_zz_jittered.values)?;
    let value = likelihood_term - kl_term;
    if !value.is_finite() {
        return Err(SvgpError::NonFiniteElbo);
    }
    Ok(ElboEstimate {
        value,
        likelihood_term,
        kl_term,
        n_samples: b,
        per_sample_loglik,
    })
}

/// Build the fully differentiable ELBO on top of an existing `[N, D]`
/// latents node. Jitter must be pre-selected (see [`kernel::choose_jitter`])
/// so the graph stays static; the reparameterization noise enters as
/// constants, which also freezes it for finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn build_elbo_graph<S: Scalar>(
    g: &mut Graph<S>,
    latents: NodeId,
    labels: &[u8],
    z: NodeId,
    log_l: NodeId,
    mean: MeanNodes,
    log_sigma2: NodeId,
    jitter: S,
    config: ElboConfig,
) -> Result<ElboNodes, AdError> {
    let n = g.shape(latents)[0];
    let m = g.shape(z)[0];
    let b = config.n_samples;
    let (eps_u, eps_f) = draw_noise::<S>(m, n, b, config.seed);

    // Kernel blocks.
    let k_zz = graph_kernel(g, z, z, log_l, Some(jitter))?;
    g.label(k_zz, "svgp.k_zz");
    let l_chol = g.cholesky(k_zz)?;
    g.label(l_chol, "svgp.chol_k_zz");
    let k_vz = graph_kernel(g, latents, z, log_l, None)?;
    g.label(k_vz, "svgp.k_vz");

    // Variational mean as [M, 1].
    let mean_u = match mean {
        MeanNodes::Alpha(alpha) => g.matmul(z, alpha)?,
        MeanNodes::Free(mn) => mn,
    };

    // U = mean 1^T + sigma * eps_u, differentiable through mean and sigma.
    let half_log = g.scale(log_sigma2, S::of(0.5))?;
    let sigma = g.exp(half_log)?;
    let ones_row = g.constant(Tensor::filled(&[1, b], S::one()));
    let mean_rep = g.matmul(mean_u, ones_row)?;
    let eps_u_node = g.constant(eps_u);
    let scaled_eps = g.mul_scalar(eps_u_node, sigma)?;
    let u = g.add(mean_rep, scaled_eps)?;

    // Conditional mean K_vz K_zz^{-1} U.
    let solve1 = g.solve_lower(l_chol, u)?;
    let kzz_inv_u = g.solve_lower_t(l_chol, solve1)?;
    let f_mean = g.matmul(k_vz, kzz_inv_u)?;

    // Conditional variance diag: 1 - rowsum(K_vz ∘ (K_zz^{-1} K_zv)^T).
    let k_zv = g.transpose(k_vz)?;
    let s1 = g.solve_lower(l_chol, k_zv)?;
    let kzz_inv_kzv = g.solve_lower_t(l_chol, s1)?;
    let q_t = g.transpose(kzz_inv_kzv)?;
    let prod = g.mul(k_vz, q_t)?;
    let q_diag = g.sum_rows(prod)?;
    let ones_n = g.constant(Tensor::filled(&[n], S::one()));
    let raw_var = g.sub(ones_n, q_diag)?;
    let var = g.clamp_min(raw_var, S::zero())?;
    g.label(var, "svgp.cond_var");
    let var_safe = g.add_const(var, S::of(VARIANCE_FLOOR))?;
    let sd = g.sqrt(var_safe)?;

    // f = mean + sd ∘ eps_f, then the factorized Bernoulli likelihood.
    let eps_f_node = g.constant(eps_f);
    let noise = g.mul_col_vec(eps_f_node, sd)?;
    let f = g.add(f_mean, noise)?;
    let ll = g.bernoulli_log_lik(f, labels.to_vec())?;
    let ll_sum = g.sum_all(ll)?;
    let scale = S::of(config.total_count as f64 / (n as f64 * b as f64));
    let likelihood = g.scale(ll_sum, scale)?;
    g.label(likelihood, "svgp.likelihood");

    // Analytic KL against N(0, K_zz + jitter I).
    let eye = g.constant(Tensor::identity(m));
    let l_inv = g.solve_lower(l_chol, eye)?;
    let l_inv_sq = g.mul(l_inv, l_inv)?;
    let trace_kinv = g.sum_all(l_inv_sq)?;
    let sigma2 = g.exp(log_sigma2)?;
    let t1 = g.mul(sigma2, trace_kinv)?;
    let w = g.solve_lower(l_chol, mean_u)?;
    let w_sq = g.mul(w, w)?;
    let quad = g.sum_all(w_sq)?;
    let diag = g.diag_part(l_chol)?;
    let log_diag = g.ln(diag)?;
    let half_logdet = g.sum_all(log_diag)?;
    let logdet = g.scale(half_logdet, S::of(2.0))?;
    let m_s = S::of(m as f64);
    let neg_m_logs2 = g.scale(log_sigma2, -m_s)?;
    let sum1 = g.add(t1, quad)?;
    let sum2 = g.add(sum1, logdet)?;
    let sum3 = g.add(sum2, neg_m_logs2)?;
    let shifted = g.add_const(sum3, -m_s)?;
    let kl = g.scale(shifted, S::of(0.5))?;
    g.label(kl, "svgp.kl");

    let elbo = g.sub(likelihood, kl)?;
    g.label(elbo, "svgp.elbo");
    Ok(ElboNodes {
        elbo,
        likelihood,
        kl,
    })
}

/// Convenience: evaluate an ELBO graph over fixed latent constants; used by
/// tests to cross-check against [`elbo_on_latents`].
#[allow(clippy::too_many_arguments)]
pub fn graph_elbo_on_latents<S: Scalar>(
    latents: &Tensor<S>,
    labels: &[u8],
    state: &VariationalState<S>,
    lengthscales: &LengthScales<S>,
    config: ElboConfig,
) -> Result<(Graph<S>, ElboNodes), SvgpError> {
    let jitter = kernel::choose_jitter(&state.z, lengthscales)?;
    let mut g = Graph::new();
    let v = g.constant(latents.clone());
    let z = g.param("svgp.z", state.z.clone())?;
    let log_l = g.param(
        "kernel.log_l",
        Tensor::vector(lengthscales.log_values().to_vec()),
    )?;
    let mean = match &state.mean {
        VariationalMean::ZAlpha(alpha) => MeanNodes::Alpha(g.param("svgp.alpha", alpha.clone())?),
        VariationalMean::Free(mu) => MeanNodes::Free(g.param("svgp.m", mu.clone())?),
    };
    let log_sigma2 = g.param("svgp.log_sigma2", Tensor::scalar(state.log_sigma2))?;
    let nodes = build_elbo_graph(&mut g, v, labels, z, log_l, mean, log_sigma2, jitter, config)?;
    g.output("elbo", nodes.elbo)?;
    g.output("likelihood", nodes.likelihood)?;
    g.output("kl", nodes.kl)?;
    Ok((g, nodes))
}
