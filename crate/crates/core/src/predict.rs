//! Predictive distribution and uncertainty per patient, uncertainty-based
//! cohort filtering, and covariance biclustering for population structure.

use thiserror::Error;

use crate::autodiff::sigmoid;
use crate::data::{fnv1a, Cohort};
use crate::kernel::{self, KernelError};
use crate::linalg::{self, LinalgError};
use crate::model::{ModelError, RiskModel};
use crate::rng::{derive_seed, Stream};
use crate::scalar::Scalar;
use crate::svgp::VARIANCE_FLOOR;
use crate::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("model has not been trained")]
    Untrained,
    #[error("prediction needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("biclustering needs at least 4 patients, got {0}")]
    TooFewPatients(usize),
    #[error("remove fraction {0} would empty the retained set")]
    EmptyRetained(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-patient risk distribution summarized from Monte-Carlo samples of
/// `sigmoid(f*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution<S> {
    /// Mean predicted risk probability, in (0, 1).
    pub mean: S,
    /// Population variance of the probability samples, in [0, 0.25].
    pub epistemic_variance: S,
    pub n_samples: usize,
}

/// A prediction bound to its patient.
#[derive(Debug, Clone)]
pub struct PatientPrediction<S> {
    pub patient_id: String,
    pub dist: PredictiveDistribution<S>,
    /// 1 iff the mean risk is at least 0.5 (ties to 1).
    pub label_pred: u8,
}

/// Mean and population variance of probability samples.
pub fn summarize_prob_samples<S: Scalar>(samples: &[S]) -> (S, S) {
    let n = S::of(samples.len() as f64);
    let mean = samples.iter().fold(S::zero(), |a, &x| a + x) / n;
    let var = samples
        .iter()
        .fold(S::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    (mean, var)
}

/// Monte-Carlo predictive distributions for the given patients.
///
/// Each patient gets an independent RNG stream derived from
/// `(seed, patient_id)`, so per-patient results do not depend on batch
/// composition or ordering.
pub fn predict<S: Scalar>(
    model: &RiskModel<S>,
    cohort: &Cohort<S>,
    indices: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PatientPrediction<S>>, PredictError> {
    if !model.svi_trained {
        return Err(PredictError::Untrained);
    }
    if n_samples < 2 {
        return Err(PredictError::TooFewSamples(n_samples));
    }
    let latents = model.latents(cohort, indices)?;
    let state = model.variational_state()?;
    let ls = model.lengthscales()?;
    let m = state.inducing_count();

    let k_zz = kernel::kernel_matrix(&state.z, &state.z, &ls)?;
    let (l, _) = kernel::stabilized_cholesky(&k_zz)?;
    let mean_u = state.mean_u();
    let sigma = (state.log_sigma2 * S::of(0.5)).exp();

    let mut out = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        let patient_id = cohort.sequences[idx].patient_id.clone();
        let v_row = Tensor::new_unchecked(
            vec![1, latents.cols()],
            latents.row(row).to_vec(),
        );
        let k_v = kernel::kernel_matrix(&v_row, &state.z, &ls)?.values;
        let k_col = Tensor::new_unchecked(vec![m, 1], k_v.row(0).to_vec());
        let c_v = linalg::tri_solve_lower_t(&l, &linalg::tri_solve_lower(&l, &k_col));
        let q = k_col
            .data()
            .iter()
            .zip(c_v.data())
            .fold(S::zero(), |a, (&x, &y)| a + x * y);
        let var_f = (S::one() - q).max(S::zero());
        let sd_f = (var_f + S::of(VARIANCE_FLOOR)).sqrt();

        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(seed, Stream::Prediction, fnv1a(patient_id.as_bytes())));
        let mut probs = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            // u ~ q(u), then the marginal f | u at this latent point
            let mut mean_f = S::zero();
            for i in 0..m {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let u_i = mean_u.data()[i] + sigma * S::of(eps);
                mean_f = mean_f + c_v.data()[i] * u_i;
            }
            let eps_f: f64 = StandardNormal.sample(&mut rng);
            let f = mean_f + sd_f * S::of(eps_f);
            probs.push(sigmoid(f));
        }
        let (mean, epistemic_variance) = summarize_prob_samples(&probs);
        out.push(PatientPrediction {
            patient_id,
            dist: PredictiveDistribution {
                mean,
                epistemic_variance,
                n_samples,
            },
            label_pred: u8::from(mean >= S::of(0.5)),
        });
    }
    Ok(out)
}

/// Indices retained after removing the `floor(q * N)` highest-variance
/// patients; variance ties break by patient id ascending. The returned
/// indices preserve input order.
pub fn uncertainty_filter<S: Scalar>(
    predictions: &[PatientPrediction<S>],
    remove_fraction: f64,
) -> Result<Vec<usize>, PredictError> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(PredictError::EmptyRetained(remove_fraction));
    }
    let n = predictions.len();
    let k = (remove_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .dist
            .epistemic_variance
            .partial_cmp(&predictions[a].dist.epistemic_variance)
            .expect("finite variances")
            .then(predictions[a].patient_id.cmp(&predictions[b].patient_id))
    });
    let mut retained: Vec<usize> = order[k..].to_vec();
    retained.sort_unstable();
    Ok(retained)
}

/// Kernel matrix over a patient set plus a two-way spectral partition of it.
#[derive(Debug, Clone)]
pub struct CovarianceExport<S> {
    pub patient_ids: Vec<String>,
    /// Kernel matrix in input order.
    pub matrix: Tensor<S>,
    /// Cluster assignment (0 or 1) per patient, input order.
    pub assignment: Vec<u8>,
    /// Permutation grouping patients by cluster.
    pub ordering: Vec<usize>,
    /// True when the second eigenvalue vanishes (single effective cluster).
    pub degenerate: bool,
}

impl<S: Scalar> CovarianceExport<S> {
    /// The kernel matrix with rows and columns permuted by `ordering`.
    pub fn reordered_matrix(&self) -> Tensor<S> {
        let n = self.ordering.len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &pi) in self.ordering.iter().enumerate() {
            for (j, &pj) in self.ordering.iter().enumerate() {
                out.set(i, j, self.matrix.at(pi, pj));
            }
        }
        out
    }
}

/// Two-way spectral partition of the fused-latent kernel matrix: sign of
/// the second eigenvector of the symmetric-normalized kernel.
pub fn covariance_bicluster<S: Scalar>(
    model: &RiskModel<S>,
    cohort: &Cohort<S>,
    indices: &[usize],
) -> Result<CovarianceExport<S>, PredictError> {
    if indices.len() < 4 {
        return Err(PredictError::TooFewPatients(indices.len()));
    }
    let latents = model.latents(cohort, indices)?;
    let ls = model.lengthscales()?;
    let k = kernel::kernel_matrix(&latents, &latents, &ls)?.values;
    let patient_ids = indices
        .iter()
        .map(|&i| cohort.sequences[i].patient_id.clone())
        .collect();
    let (assignment, degenerate) = spectral_bipartition(&k)?;
    let mut ordering: Vec<usize> = (0..indices.len()).collect();
    ordering.sort_by_key(|&i| (assignment[i], i));
    Ok(CovarianceExport {
        patient_ids,
        matrix: k,
        assignment,
        ordering,
        degenerate,
    })
}

/// Partition by the sign of the second eigenvector of
/// `D^{-1/2} K D^{-1/2}`. The leading eigenpair of that matrix is known
/// analytically (`lambda = 1`, eigenvector `D^{1/2} 1`), so only the second
/// is iterated for.
pub fn spectral_bipartition<S: Scalar>(k: &Tensor<S>) -> Result<(Vec<u8>, bool), PredictError> {
    let n = k.rows();
    let row_sums: Vec<S> = (0..n)
        .map(|i| k.row(i).iter().fold(S::zero(), |a, &x| a + x))
        .collect();
    let inv_sqrt: Vec<S> = row_sums.iter().map(|&d| S::one() / d.sqrt()).collect();
    let mut normalized = k.clone();
    for i in 0..n {
        for j in 0..n {
            let v = normalized.at(i, j) * inv_sqrt[i] * inv_sqrt[j];
            normalized.set(i, j, v);
        }
    }
    let mut v1: Vec<S> = row_sums.iter().map(|&d| d.sqrt()).collect();
    let norm = v1.iter().fold(S::zero(), |a, &x| a + x * x).sqrt();
    for x in &mut v1 {
        *x = *x / norm;
    }
    let (lambda2, mut v2) =
        linalg::second_eigen_with_known_first(&normalized, S::one(), &v1, 50_000, 1e-12)?;
    if lambda2.abs() <= S::of(1e-9) {
        return Ok((vec![0; n], true));
    }
    // canonical sign: largest-magnitude component positive
    let pivot = (0..n)
        .max_by(|&a, &b| v2[a].abs().partial_cmp(&v2[b].abs()).unwrap())
        .unwrap();
    if v2[pivot] < S::zero() {
        for x in &mut v2 {
            *x = -*x;
        }
    }
    let assignment = v2
        .iter()
        .map(|&x| u8::from(x >= S::zero()))
        .collect();
    Ok((assignment, false))
}
