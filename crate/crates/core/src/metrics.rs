//! Imbalance-aware evaluation: F1, Cohen's kappa, PR-AUC with step
//! interpolation, and the paired one-sided t-test.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("labels and predictions have different lengths ({labels} vs {other})")]
    LengthMismatch { labels: usize, other: usize },
    #[error("labels and predictions must be 0 or 1")]
    NotBinary,
    #[error("PR-AUC needs at least one positive label")]
    NoPositives,
    #[error("degenerate differences (zero variance)")]
    DegenerateDifferences,
    #[error("t-test needs at least two values")]
    TooFewValues,
}

/// Scores for one split, plus per-class support counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub f1: f64,
    pub kappa: f64,
    pub pr_auc: f64,
    pub support_negative: usize,
    pub support_positive: usize,
}

fn check_binary_pair(labels: &[u8], other: &[u8]) -> Result<(), MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if labels.len() != other.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            other: other.len(),
        });
    }
    if labels.iter().chain(other).any(|&v| v > 1) {
        return Err(MetricsError::NotBinary);
    }
    Ok(())
}

/// Harmonic mean of precision and recall on the positive class; 0 when
/// precision + recall is 0.
pub fn f1(labels: &[u8], predictions: &[u8]) -> Result<f64, MetricsError> {
    check_binary_pair(labels, predictions)?;
    let mut tp = 0f64;
    let mut fp = 0f64;
    let mut fn_ = 0f64;
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => tp += 1.0,
            (0, 1) => fp += 1.0,
            (1, 0) => fn_ += 1.0,
            _ => {}
        }
    }
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if prec + rec == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * prec * rec / (prec + rec))
}

/// Chance-corrected agreement `(p_o - p_e) / (1 - p_e)`; 0 when `p_e = 1`.
pub fn cohens_kappa(labels: &[u8], predictions: &[u8]) -> Result<f64, MetricsError> {
    check_binary_pair(labels, predictions)?;
    let n = labels.len() as f64;
    let mut agree = 0f64;
    let mut true_pos = 0f64;
    let mut pred_pos = 0f64;
    for (&y, &p) in labels.iter().zip(predictions) {
        if y == p {
            agree += 1.0;
        }
        true_pos += y as f64;
        pred_pos += p as f64;
    }
    let p_o = agree / n;
    let marginal = |pos: f64| (pos / n, (n - pos) / n);
    let (ty, fy) = marginal(true_pos);
    let (tp, fp) = marginal(pred_pos);
    let p_e = ty * tp + fy * fp;
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Area under the precision-recall curve as the step sum
/// `Σ_k Prec(k) ΔRec(k)` over distinct thresholds in descending score
/// order, with tied scores grouped at one operating point.
pub fn pr_auc<S: Scalar>(labels: &[u8], scores: &[S]) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            other: scores.len(),
        });
    }
    if labels.iter().any(|&v| v > 1) {
        return Err(MetricsError::NotBinary);
    }
    let total_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    if total_pos == 0.0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut auc = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // absorb the whole tie group before emitting an operating point
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let precision = tp / (tp + fp);
        let recall = tp / total_pos;
        auc += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(auc)
}

/// All three metrics at once, from hard predictions plus ranking scores.
pub fn evaluate_all<S: Scalar>(
    labels: &[u8],
    predictions: &[u8],
    scores: &[S],
) -> Result<EvalResult, MetricsError> {
    Ok(EvalResult {
        f1: f1(labels, predictions)?,
        kappa: cohens_kappa(labels, predictions)?,
        pr_auc: pr_auc(labels, scores)?,
        support_negative: labels.iter().filter(|&&y| y == 0).count(),
        support_positive: labels.iter().filter(|&&y| y == 1).count(),
    })
}

/// Paired t-test on metric differences: `t = mean / (sd / sqrt(n))` with a
/// one-sided p-value `P(T_{n-1} >= t)`.
pub fn paired_t_test(diffs: &[f64]) -> Result<(f64, f64), MetricsError> {
    if diffs.len() < 2 {
        return Err(MetricsError::TooFewValues);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(MetricsError::DegenerateDifferences);
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let p = t_upper_tail(t, n - 1.0);
    Ok((t, p))
}

/// `P(T_df >= t)` via the regularized incomplete beta function.
fn t_upper_tail(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let half_tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction
/// (Numerical Recipes style); absolute error well under 1e-6.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of `ln Γ(x)`.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;

    #[test]
    fn f1_perfect_predictions() {
        let labels = [1u8, 0, 1, 1, 0];
        assert_eq!(f1(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn f1_half_precision_half_recall() {
        // Prec = Rec = 0.5 -> F1 = 0.5
        let labels = [1u8, 1, 0, 0];
        let preds = [1u8, 0, 1, 0];
        assert_eq!(f1(&labels, &preds).unwrap(), 0.5);
    }

    #[test]
    fn f1_zero_recall_convention() {
        let labels = [1u8, 1, 0];
        let preds = [0u8, 0, 0];
        assert_eq!(f1(&labels, &preds).unwrap(), 0.0);
    }

    #[test]
    fn f1_ignores_true_negatives() {
        let labels_a = [1u8, 0, 1, 0];
        let preds_a = [1u8, 0, 0, 1];
        let labels_b = [1u8, 0, 1, 0, 0, 0, 0];
        let preds_b = [1u8, 0, 0, 1, 0, 0, 0];
        assert_eq!(
            f1(&labels_a, &preds_a).unwrap(),
            f1(&labels_b, &preds_b).unwrap()
        );
    }

    #[test]
    fn kappa_perfect_agreement() {
        let labels = [1u8, 0, 1, 0, 1];
        assert_eq!(cohens_kappa(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn kappa_hand_confusion_matrix() {
        // confusion [[45, 15], [25, 15]] (rows = true 0/1, cols = pred 0/1)
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for (y, p, count) in [(0u8, 0u8, 45), (0, 1, 15), (1, 0, 25), (1, 1, 15)] {
            for _ in 0..count {
                labels.push(y);
                preds.push(p);
            }
        }
        let kappa = cohens_kappa(&labels, &preds).unwrap();
        // p_o = 0.60, p_e = 0.54, kappa = 0.06 / 0.46
        assert!((kappa - 0.06 / 0.46).abs() < 1e-12);
        assert!((kappa - 0.13043).abs() < 1e-4);
    }

    #[test]
    fn kappa_near_zero_for_independent_predictions() {
        let rng = &mut ChaCha20Rng::seed_from_u64(17);
        let n = 10_000;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let kappa = cohens_kappa(&labels, &preds).unwrap();
        assert!(kappa.abs() < 0.05, "kappa {kappa}");
    }

    #[test]
    fn pr_auc_perfect_ranking() {
        let labels = [1u8, 1, 0, 0];
        let scores = [0.9f64, 0.8, 0.3, 0.1];
        assert!((pr_auc(&labels, &scores).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pr_auc_interleaved_hand_sum() {
        let labels = [1u8, 0, 1, 0];
        let scores = [0.9f64, 0.8, 0.3, 0.1];
        // 1 * 0.5 + (2/3) * 0.5
        let expected = 0.5 + 2.0 / 3.0 * 0.5;
        assert!((pr_auc(&labels, &scores).unwrap() - expected).abs() < 1e-12);
        assert!((pr_auc(&labels, &scores).unwrap() - 0.83333).abs() < 1e-4);
    }

    #[test]
    fn pr_auc_random_scores_approach_positive_rate() {
        let rng = &mut ChaCha20Rng::seed_from_u64(3);
        let n = 10_000;
        let pi = 0.25;
        let labels: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random_range(0.0..1.0) < pi))
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let auc = pr_auc(&labels, &scores).unwrap();
        assert!((auc - pi).abs() < 0.03, "auc {auc}");
    }

    #[test]
    fn pr_auc_requires_positives() {
        assert!(matches!(
            pr_auc(&[0u8, 0], &[0.1f64, 0.2]),
            Err(MetricsError::NoPositives)
        ));
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(f1(&[], &[]), Err(MetricsError::Empty)));
        assert!(matches!(cohens_kappa(&[], &[]), Err(MetricsError::Empty)));
        assert!(matches!(
            pr_auc::<f64>(&[], &[]),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn t_test_hand_case() {
        let (t, p) = paired_t_test(&[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 * 3.0f64.sqrt()).abs() < 1e-12);
        assert!((t - 3.4641).abs() < 1e-4);
        assert!((p - 0.0371).abs() < 5e-4, "p = {p}");
    }

    #[test]
    fn t_test_strong_effect_is_significant() {
        // n = 6, mean 0.05, sd 0.01 -> t ≈ 12.25, p < 0.01
        let diffs = [0.0626, 0.0426, 0.0526, 0.0626, 0.0426, 0.0370];
        let mean: f64 = diffs.iter().sum::<f64>() / 6.0;
        let sd = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / 5.0).sqrt();
        let (t, p) = paired_t_test(&diffs).unwrap();
        assert!((t - mean / (sd / 6.0f64.sqrt())).abs() < 1e-9);
        assert!(p < 0.01);
    }

    #[test]
    fn t_test_rejects_zero_variance() {
        assert!(matches!(
            paired_t_test(&[0.5, 0.5, 0.5]),
            Err(MetricsError::DegenerateDifferences)
        ));
    }

    #[test]
    fn incomplete_beta_reference_values() {
        // I_x(1, 0.5) = 1 - sqrt(1 - x)
        for &x in &[0.1f64, 0.25, 0.5, 1.0 / 7.0] {
            let expected = 1.0 - (1.0 - x).sqrt();
            assert!((incomplete_beta(1.0, 0.5, x) - expected).abs() < 1e-10);
        }
        // symmetry: I_x(a, b) = 1 - I_{1-x}(b, a)
        let v = incomplete_beta(2.5, 1.5, 0.3);
        let w = 1.0 - incomplete_beta(1.5, 2.5, 0.7);
        assert!((v - w).abs() < 1e-10);
    }

    // Brute-force references: direct counting and all-threshold enumeration.
    fn brute_f1(labels: &[u8], preds: &[u8]) -> f64 {
        let tp = labels
            .iter()
            .zip(preds)
            .filter(|(&y, &p)| y == 1 && p == 1)
            .count() as f64;
        let pp = preds.iter().filter(|&&p| p == 1).count() as f64;
        let ap = labels.iter().filter(|&&y| y == 1).count() as f64;
        let prec = if pp > 0.0 { tp / pp } else { 0.0 };
        let rec = if ap > 0.0 { tp / ap } else { 0.0 };
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    fn brute_kappa(labels: &[u8], preds: &[u8]) -> f64 {
        let n = labels.len() as f64;
        let mut counts = [[0f64; 2]; 2];
        for (&y, &p) in labels.iter().zip(preds) {
            counts[y as usize][p as usize] += 1.0;
        }
        let p_o = (counts[0][0] + counts[1][1]) / n;
        let p_e = ((counts[0][0] + counts[0][1]) / n) * ((counts[0][0] + counts[1][0]) / n)
            + ((counts[1][0] + counts[1][1]) / n) * ((counts[0][1] + counts[1][1]) / n);
        if (1.0 - p_e).abs() < 1e-15 {
            0.0
        } else {
            (p_o - p_e) / (1.0 - p_e)
        }
    }

    fn brute_pr_auc(labels: &[u8], scores: &[f64]) -> f64 {
        // enumerate distinct thresholds from above, recomputing the whole
        // confusion at each
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut auc = 0.0;
        let mut prev_rec = 0.0;
        for &th in &thresholds {
            let tp = labels
                .iter()
                .zip(scores)
                .filter(|(&y, &s)| y == 1 && s >= th)
                .count() as f64;
            let fp = labels
                .iter()
                .zip(scores)
                .filter(|(&y, &s)| y == 0 && s >= th)
                .count() as f64;
            let prec = tp / (tp + fp);
            let rec = tp / total_pos;
            auc += prec * (rec - prev_rec);
            prev_rec = rec;
        }
        auc
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let rng = &mut ChaCha20Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(1..=50usize);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            // quantized scores so tie groups actually occur
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 10.0)
                .collect();
            assert_eq!(f1(&labels, &preds).unwrap(), brute_f1(&labels, &preds));
            assert_eq!(
                cohens_kappa(&labels, &preds).unwrap(),
                brute_kappa(&labels, &preds)
            );
            if labels.iter().any(|&y| y == 1) {
                let fast = pr_auc(&labels, &scores).unwrap();
                let brute = brute_pr_auc(&labels, &scores);
                assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// All metrics are invariant to simultaneous permutation.
        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..10_000) {
            let rng = &mut ChaCha20Rng::seed_from_u64(seed);
            let n = rng.random_range(2..40usize);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(rng);
            let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
            let pp: Vec<u8> = perm.iter().map(|&i| preds[i]).collect();
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            prop_assert_eq!(f1(&labels, &preds).unwrap(), f1(&pl, &pp).unwrap());
            prop_assert_eq!(
                cohens_kappa(&labels, &preds).unwrap(),
                cohens_kappa(&pl, &pp).unwrap()
            );
            if labels.iter().any(|&y| y == 1) {
                let a = pr_auc(&labels, &scores).unwrap();
                let b = pr_auc(&pl, &ps).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// PR-AUC is invariant under strictly monotone score transforms.
        #[test]
        fn pr_auc_monotone_transform_invariant(seed in 0u64..10_000) {
            let rng = &mut ChaCha20Rng::seed_from_u64(seed);
            let n = rng.random_range(2..40usize);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
            let a = pr_auc(&labels, &scores).unwrap();
            let b = pr_auc(&labels, &transformed).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        /// kappa = 1 exactly when predictions equal labels (non-degenerate).
        #[test]
        fn kappa_is_one_iff_equal(seed in 0u64..10_000) {
            let rng = &mut ChaCha20Rng::seed_from_u64(seed);
            let n = rng.random_range(2..40usize);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            if n > 1 { labels[1] = 0; }
            prop_assert_eq!(cohens_kappa(&labels, &labels).unwrap(), 1.0);
            let mut flipped = labels.clone();
            flipped[0] = 1 - flipped[0];
            prop_assert!(cohens_kappa(&labels, &flipped).unwrap() < 1.0);
        }
    }
}
