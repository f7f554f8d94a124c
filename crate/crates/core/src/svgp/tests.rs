use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::elbo::graph_elbo_on_latents;
use super::*;
use crate::autodiff::check_gradient;
use crate::kernel::{self, LengthScales};
use crate::linalg;
use crate::tensor::Tensor;

fn rand_latents(rng: &mut ChaCha20Rng, n: usize, d: usize, spread: f64) -> Tensor<f64> {
    let data = (0..n * d).map(|_| rng.random_range(-spread..spread)).collect();
    Tensor::from_vec(vec![n, d], data).unwrap()
}

fn state_with_alpha(z: Tensor<f64>, alpha: Vec<f64>, log_sigma2: f64) -> VariationalState<f64> {
    let d = z.cols();
    assert_eq!(alpha.len(), d);
    VariationalState {
        z,
        mean: VariationalMean::ZAlpha(Tensor::from_vec(vec![d, 1], alpha).unwrap()),
        log_sigma2,
    }
}

// ---- conditional ------------------------------------------------------------

#[test]
fn conditional_interpolates_at_inducing_points() {
    let rng = &mut ChaCha20Rng::seed_from_u64(5);
    // well-separated points keep K_zz comfortably conditioned
    let z = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![2.0, 0.0],
        vec![0.0, 2.0],
        vec![2.0, 2.0],
    ]);
    let u = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let ls = LengthScales::unit(2);
    let cond = conditional_f_given_u(&z, &u, &z, &ls).unwrap();
    assert!(cond.mean.max_abs_diff(&u) < 1e-5);
    for &v in &cond.variance_diag() {
        assert!((0.0..1e-6).contains(&v), "variance {v} out of range");
    }
}

#[test]
fn conditional_single_point_hand_algebra() {
    // With one inducing point and k(v, z) = c: mean = c u, variance = 1 - c^2.
    let v: Tensor<f64> = Tensor::from_rows(&[vec![0.0]]);
    let z = Tensor::from_rows(&[vec![1.0]]);
    let u = Tensor::vector(vec![0.8]);
    let ls = LengthScales::unit(1);
    let c = (-0.5f64).exp();
    let cond = conditional_f_given_u(&v, &u, &z, &ls).unwrap();
    assert!((cond.mean.data()[0] - c * 0.8).abs() < 1e-5);
    assert!((cond.covariance.at(0, 0) - (1.0 - c * c)).abs() < 1e-5);
}

#[test]
fn conditional_reverts_to_prior_far_away() {
    let v: Tensor<f64> = Tensor::from_rows(&[vec![100.0, 100.0]]);
    let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let u = Tensor::vector(vec![3.0, -2.0]);
    let ls = LengthScales::unit(2);
    let cond = conditional_f_given_u(&v, &u, &z, &ls).unwrap();
    assert!(cond.mean.data()[0].abs() < 1e-9);
    assert!((cond.covariance.at(0, 0) - 1.0).abs() < 1e-9);
}

#[test]
fn conditional_rejects_wrong_u_length() {
    let v = Tensor::from_rows(&[vec![0.0]]);
    let z = Tensor::from_rows(&[vec![1.0]]);
    let u = Tensor::vector(vec![1.0, 2.0]);
    assert!(matches!(
        conditional_f_given_u(&v, &u, &z, &LengthScales::unit(1)),
        Err(SvgpError::DimMismatch { .. })
    ));
}

// ---- sampling ---------------------------------------------------------------

#[test]
fn samples_collapse_at_tiny_variance() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let state = state_with_alpha(z.clone(), vec![0.7, -0.4], (1e-12f64).ln());
    let mean = state.mean_u();
    let samples = sample_q_u(&state, 8, 42);
    for i in 0..2 {
        for j in 0..8 {
            assert!((samples.at(i, j) - mean.data()[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn sample_mean_obeys_clt_bound() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let sigma2: f64 = 0.49;
    let state = state_with_alpha(z, vec![0.3, -0.9], sigma2.ln());
    let mean = state.mean_u();
    let b = 10_000;
    let samples = sample_q_u(&state, b, 7);
    let bound = 4.0 * (sigma2 / b as f64).sqrt();
    for i in 0..2 {
        let avg: f64 = (0..b).map(|j| samples.at(i, j)).sum::<f64>() / b as f64;
        assert!(
            (avg - mean.data()[i]).abs() < bound,
            "component {i}: {avg} vs {}",
            mean.data()[i]
        );
    }
}

#[test]
fn sampling_is_deterministic_under_seed() {
    let z = Tensor::from_rows(&[vec![1.0]]);
    let state = state_with_alpha(z, vec![0.5], 0.0);
    let a = sample_q_u(&state, 16, 99);
    let b = sample_q_u(&state, 16, 99);
    assert_eq!(a.data(), b.data());
}

// ---- KL ---------------------------------------------------------------------

#[test]
fn kl_zero_when_q_matches_prior() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let state = state_with_alpha(z, vec![0.0, 0.0], 0.0);
    let kl = kl_q_p(&state, &Tensor::identity(2)).unwrap();
    assert!(kl.abs() < 1e-9);
}

#[test]
fn kl_univariate_mean_shift() {
    // M=1, K=[[1]], mean 1, sigma^2 = 1 -> 1/2.
    let z = Tensor::from_rows(&[vec![1.0]]);
    let state = state_with_alpha(z, vec![1.0], 0.0);
    let kl = kl_q_p(&state, &Tensor::identity(1)).unwrap();
    assert!((kl - 0.5).abs() < 1e-12);
}

#[test]
fn kl_univariate_variance_mismatch() {
    // M=1, K=[[1]], mean 0, sigma^2 = 2 -> (2 - 1 - ln 2)/2 ≈ 0.15343.
    let z = Tensor::from_rows(&[vec![1.0]]);
    let state = state_with_alpha(z, vec![0.0], 2.0f64.ln());
    let kl = kl_q_p(&state, &Tensor::identity(1)).unwrap();
    assert!((kl - 0.5 * (2.0 - 1.0 - 2.0f64.ln())).abs() < 1e-12);
    assert!((kl - 0.15343).abs() < 1e-5);
}

// ---- Bernoulli likelihood -----------------------------------------------------

#[test]
fn bernoulli_symmetry_point() {
    assert!((bernoulli_log_lik(1u8, 0.0f64) - 0.5f64.ln()).abs() < 1e-12);
    assert!((bernoulli_log_lik(0u8, 0.0f64) - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn bernoulli_stable_tails() {
    let hit: f64 = bernoulli_log_lik(1u8, 50.0);
    assert!(hit > -1e-20 && hit <= 0.0);
    let miss: f64 = bernoulli_log_lik(0u8, 50.0);
    assert!(miss.is_finite());
    assert!((miss + 50.0).abs() < 1e-9);
}

// ---- ELBO -------------------------------------------------------------------

fn toy_setup(seed: u64) -> (Tensor<f64>, Vec<u8>, VariationalState<f64>, LengthScales<f64>) {
    let rng = &mut ChaCha20Rng::seed_from_u64(seed);
    let latents = rand_latents(rng, 4, 2, 1.5);
    let labels = vec![1, 0, 1, 1];
    let z = rand_latents(rng, 3, 2, 1.5);
    let alpha = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let state = state_with_alpha(z, alpha, -0.3);
    let log_l = vec![rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    (latents, labels, state, LengthScales::from_log_values(log_l))
}

#[test]
fn elbo_full_batch_scale_is_unity() {
    let (latents, labels, state, ls) = toy_setup(1);
    let config = ElboConfig {
        n_samples: 16,
        total_count: 4,
        seed: 11,
    };
    let est = elbo_on_latents(&latents, &labels, &state, &ls, config).unwrap();
    let mean_ll: f64 =
        est.per_sample_loglik.iter().sum::<f64>() / est.per_sample_loglik.len() as f64;
    assert!((est.likelihood_term - mean_ll).abs() < 1e-12);
    assert!((est.value - (est.likelihood_term - est.kl_term)).abs() < 1e-12);
    assert!(est.kl_term >= -1e-10);
}

#[test]
fn graph_and_numeric_elbo_agree() {
    for seed in 0..5u64 {
        let (latents, labels, state, ls) = toy_setup(seed);
        let config = ElboConfig {
            n_samples: 8,
            total_count: 100,
            seed: seed * 13 + 1,
        };
        let numeric = elbo_on_latents(&latents, &labels, &state, &ls, config).unwrap();
        let (g, _) = graph_elbo_on_latents(&latents, &labels, &state, &ls, config).unwrap();
        let out = g.evaluate_outputs(&BTreeMap::new()).unwrap();
        assert!((out["elbo"].scalar_value() - numeric.value).abs() < 1e-9);
        assert!((out["likelihood"].scalar_value() - numeric.likelihood_term).abs() < 1e-9);
        assert!((out["kl"].scalar_value() - numeric.kl_term).abs() < 1e-9);
    }
}

#[test]
fn elbo_gradients_pass_finite_differences_with_frozen_noise() {
    let (latents, labels, state, ls) = toy_setup(3);
    let config = ElboConfig {
        n_samples: 4,
        total_count: 50,
        seed: 21,
    };
    let (g, nodes) = graph_elbo_on_latents(&latents, &labels, &state, &ls, config).unwrap();
    let report = check_gradient(&g, &BTreeMap::new(), nodes.elbo, 1e-5, 1e-3).unwrap();
    assert!(
        report.passed(),
        "per-param errors: {:?}",
        report.per_param
    );
}

#[test]
fn free_mean_variant_matches_formula() {
    // KL with a free mean vector reduces to the same univariate cases.
    let state: VariationalState<f64> = VariationalState {
        z: Tensor::from_rows(&[vec![1.0]]),
        mean: VariationalMean::Free(Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap()),
        log_sigma2: 0.0,
    };
    let kl = kl_q_p(&state, &Tensor::identity(1)).unwrap();
    assert!((kl - 0.5).abs() < 1e-12);
}

#[test]
fn doubling_samples_shrinks_mc_noise() {
    let (latents, labels, state, ls) = toy_setup(4);
    let spread = |b: usize| -> f64 {
        let values: Vec<f64> = (0..50u64)
            .map(|s| {
                let config = ElboConfig {
                    n_samples: b,
                    total_count: 4,
                    seed: 1000 + s,
                };
                elbo_on_latents(&latents, &labels, &state, &ls, config)
                    .unwrap()
                    .value
            })
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
    };
    let sd_b = spread(32);
    let sd_2b = spread(64);
    let ratio = sd_2b / sd_b;
    let target = 1.0 / 2.0f64.sqrt();
    assert!(
        (ratio - target).abs() <= 0.3 * target,
        "std ratio {ratio} not within 30% of {target}"
    );
}

#[test]
fn exact_interpolation_limit_reproduces_u_star() {
    // Z = V, sigma^2 -> 0, alpha solving Z alpha = u*: the sampled f equals u*.
    let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]);
    let alpha = vec![0.4, -0.7];
    let u_star = linalg::matmul(
        &z,
        &Tensor::from_vec(vec![2, 1], alpha.clone()).unwrap(),
    );
    let state = state_with_alpha(z.clone(), alpha, (1e-12f64).ln());
    let ls = LengthScales::unit(2);
    let samples = sample_q_u(&state, 3, 17);
    for j in 0..3 {
        let u = Tensor::vector((0..3).map(|i| samples.at(i, j)).collect());
        let cond = conditional_f_given_u(&z, &u, &z, &ls).unwrap();
        let flat = Tensor::vector(u_star.data().to_vec());
        assert!(cond.mean.max_abs_diff(&flat) < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// KL is non-negative for arbitrary parameters and jittered kernels.
    #[test]
    fn kl_is_nonnegative(seed in 0u64..5000) {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);
        let m = rng.random_range(1..5usize);
        let d = rng.random_range(1..4usize);
        let z = rand_latents(rng, m, d, 2.0);
        let alpha: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let log_sigma2 = rng.random_range(-2.0..1.5);
        let state = state_with_alpha(z.clone(), alpha, log_sigma2);
        let ls = LengthScales::unit(d);
        let k = kernel::kernel_matrix(&z, &z, &ls).unwrap();
        let (_, jitter) = kernel::stabilized_cholesky(&k).unwrap();
        let k_j = kernel::add_jitter(&k, jitter);
        let kl = kl_q_p(&state, &k_j.values).unwrap();
        prop_assert!(kl >= -1e-10, "kl = {kl}");
    }

    /// Conditional variance lands in [0, 1] after clamping.
    #[test]
    fn conditional_variance_in_unit_interval(seed in 0u64..5000) {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);
        let n = rng.random_range(1..5usize);
        let m = rng.random_range(1..5usize);
        let d = rng.random_range(1..4usize);
        let v = rand_latents(rng, n, d, 2.0);
        let z = rand_latents(rng, m, d, 2.0);
        let u = Tensor::vector((0..m).map(|_| rng.random_range(-2.0..2.0)).collect());
        let cond = conditional_f_given_u(&v, &u, &z, &LengthScales::unit(d)).unwrap();
        for &var in &cond.variance_diag() {
            prop_assert!((0.0..=1.0 + 1e-8).contains(&var), "variance {var}");
        }
    }
}
