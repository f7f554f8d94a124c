use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::tensor::Tensor;

type G = Graph<f64>;

fn no_bindings() -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::new()
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn rand_spd(rng: &mut ChaCha20Rng, n: usize) -> Tensor<f64> {
    let a = rand_tensor(rng, &[n, n], -1.0, 1.0);
    let mut k = crate::linalg::matmul_a_bt(&a, &a);
    for i in 0..n {
        let v = k.at(i, i) + n as f64;
        k.set(i, i, v);
    }
    k
}

#[test]
fn evaluate_scalar_square() {
    let mut g = G::new();
    let x = g.param("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    g.output("y", y).unwrap();
    let out = g.evaluate_outputs(&no_bindings()).unwrap();
    assert_eq!(out["y"].scalar_value(), 9.0);

    let grad = g.gradient(&no_bindings(), y).unwrap();
    assert_eq!(grad["x"].scalar_value(), 6.0);
}

#[test]
fn evaluate_sigmoid_symmetry_point() {
    let mut g = G::new();
    let x = g.param("x", Tensor::scalar(0.0)).unwrap();
    let y = g.sigmoid(x).unwrap();
    let eval = g.evaluate(&no_bindings()).unwrap();
    assert_eq!(eval.value(y).scalar_value(), 0.5);

    // dσ/dx at 0 equals σ(0)(1-σ(0)) evaluated independently.
    let s = 0.5f64;
    let expected = s * (1.0 - s);
    let grad = g.gradient(&no_bindings(), y).unwrap();
    assert!((grad["x"].scalar_value() - expected).abs() < 1e-15);
}

#[test]
fn evaluate_softmax_uniform() {
    let mut g = G::new();
    let x = g.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let eval = g.evaluate(&no_bindings()).unwrap();
    for &v in eval.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn evaluate_is_pure() {
    let mut g = G::new();
    let x = g.input("x", vec![2, 2]).unwrap();
    let w = g
        .param("w", Tensor::from_rows(&[vec![0.3, -0.4], vec![1.2, 0.7]]))
        .unwrap();
    let prod = g.matmul(x, w).unwrap();
    let soft = g.softmax_rows(prod).unwrap();
    let out = g.sum_all(soft).unwrap();
    let mut bindings = BTreeMap::new();
    bindings.insert(
        "x".to_string(),
        Tensor::from_rows(&[vec![0.1, 0.9], vec![-0.5, 0.2]]),
    );
    let a = g.evaluate(&bindings).unwrap();
    let b = g.evaluate(&bindings).unwrap();
    assert_eq!(a.value(out).data(), b.value(out).data());
}

#[test]
fn unbound_input_is_an_error() {
    let mut g = G::new();
    g.input("x", vec![2]).unwrap();
    match g.evaluate(&no_bindings()) {
        Err(AdError::UnboundInput { name }) => assert_eq!(name, "x"),
        other => panic!("expected unbound-input error, got {other:?}"),
    }
}

#[test]
fn binding_shape_mismatch_is_an_error() {
    let mut g = G::new();
    g.input("x", vec![2]).unwrap();
    let mut bindings = BTreeMap::new();
    bindings.insert("x".to_string(), Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(
        g.evaluate(&bindings),
        Err(AdError::BindingShape { .. })
    ));
}

#[test]
fn build_time_shape_mismatch_names_the_node() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(AdError::Shape { node, .. }) => assert!(node.contains("matmul")),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn cholesky_of_indefinite_matrix_reports_pivot() {
    let mut g = G::new();
    let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
    let c = g.cholesky(k).unwrap();
    g.label(c, "test.chol");
    match g.evaluate(&no_bindings()) {
        Err(AdError::NotPositiveDefinite { node, index, .. }) => {
            assert!(node.contains("test.chol"));
            assert_eq!(index, 1);
        }
        other => panic!("expected not-positive-definite, got {other:?}"),
    }
}

#[test]
fn non_finite_forward_aborts_with_node_name() {
    let mut g = G::new();
    let x = g.param("x", Tensor::scalar(-1.0)).unwrap();
    let y = g.ln(x).unwrap();
    g.label(y, "bad.log");
    match g.evaluate(&no_bindings()) {
        Err(AdError::NonFinite { node, phase }) => {
            assert!(node.contains("bad.log"));
            assert_eq!(phase, "forward");
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn gradient_requires_scalar_target() {
    let mut g = G::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(
        g.gradient(&no_bindings(), x),
        Err(AdError::NonScalarOutput { .. })
    ));
}

#[test]
fn log_det_gradient_at_identity_is_identity() {
    // log det K through the Cholesky path: 2 * sum(ln diag(L)).
    let mut g = G::new();
    let k = g.param("k", Tensor::identity(2)).unwrap();
    let l = g.cholesky(k).unwrap();
    let d = g.diag_part(l).unwrap();
    let ld = g.ln(d).unwrap();
    let s = g.sum_all(ld).unwrap();
    let logdet = g.scale(s, 2.0).unwrap();

    let grad = g.gradient(&no_bindings(), logdet).unwrap();
    let expected = Tensor::identity(2);
    assert!(grad["k"].max_abs_diff(&expected) < 1e-10);

    // Finite-difference oracle with step 1e-5 agrees.
    let report = check_gradient(&g, &no_bindings(), logdet, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error());
}

#[test]
fn check_gradient_quadratic_form() {
    let mut g = G::new();
    let w = g
        .param("w", Tensor::from_rows(&[vec![1.5, -0.3], vec![0.2, 0.8]]))
        .unwrap();
    let x = g.constant(Tensor::from_vec(vec![2, 1], vec![0.7, -1.2]).unwrap());
    let wx = g.matmul(w, x).unwrap();
    let sq = g.mul(wx, wx).unwrap();
    let out = g.sum_all(sq).unwrap();
    let report = check_gradient(&g, &no_bindings(), out, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error());
    assert!(report.max_rel_error() < 1e-4);
}

#[test]
fn check_gradient_zero_parameter_graph_is_empty() {
    let mut g = G::new();
    let c = g.constant(Tensor::scalar(4.0));
    let out = g.mul(c, c).unwrap();
    let report = check_gradient(&g, &no_bindings(), out, 1e-5, 1e-4).unwrap();
    assert!(report.is_empty());
    assert_eq!(report.max_rel_error(), 0.0);
}

#[test]
fn attention_masked_keys_do_not_affect_content_rows() {
    let build = |kv_tail: f64| -> Tensor<f64> {
        let mut g = G::new();
        let q = g.constant(Tensor::from_rows(&[
            vec![0.3, -0.2, 0.8, 0.1],
            vec![0.5, 0.5, -0.5, 0.2],
            vec![9.0, 9.0, 9.0, 9.0], // pad row query; output ignored
        ]));
        let mut k_rows = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.3, 0.2, 0.0]];
        k_rows.push(vec![kv_tail; 4]); // pad position key
        let k = g.constant(Tensor::from_rows(&k_rows));
        let v = g.constant(Tensor::from_rows(&[
            vec![1.0, 0.0, 2.0, -1.0],
            vec![0.0, 1.0, -2.0, 1.0],
            vec![kv_tail; 4], // pad position value
        ]));
        let out = g.attention(q, k, v, 2, 2).unwrap();
        let eval = g.evaluate(&no_bindings()).unwrap();
        eval.value(out).clone()
    };
    let a = build(0.0);
    let b = build(123.0);
    for i in 0..2 {
        assert_eq!(a.row(i), b.row(i), "content row {i} changed with pad data");
    }
}

#[test]
fn cholesky_solve_examples() {
    let k = Tensor::identity(3);
    let b = Tensor::from_vec(vec![3, 1], vec![0.4, -1.0, 2.0]).unwrap();
    let x = cholesky_solve(&k, &b).unwrap();
    assert!(x.max_abs_diff(&b) < 1e-14);
}

// ---- finite-difference property suite over every primitive ----------------

/// Reduce any node to a scalar through a fixed random weighting so that the
/// adjoint reaching the op under test is non-uniform.
fn weighted_scalar(g: &mut G, rng: &mut ChaCha20Rng, node: NodeId) -> NodeId {
    let shape = g.shape(node).to_vec();
    if shape.is_empty() {
        return node;
    }
    let w = rand_tensor(rng, &shape, 0.5, 1.5);
    let wc = g.constant(w);
    let prod = g.mul(node, wc).unwrap();
    g.sum_all(prod).unwrap()
}

fn assert_fd(g: &G, target: NodeId, seed: u64, what: &str) {
    let report = check_gradient(g, &no_bindings(), target, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "{what} (seed {seed}): max rel err {}",
        report.max_rel_error()
    );
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..100u64 {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);

        // matmul + transpose + add + sub
        {
            let mut g = G::new();
            let a = g.param("a", rand_tensor(rng, &[3, 2], -1.0, 1.0)).unwrap();
            let b = g.param("b", rand_tensor(rng, &[2, 4], -1.0, 1.0)).unwrap();
            let c = g.param("c", rand_tensor(rng, &[4, 3], -1.0, 1.0)).unwrap();
            let ab = g.matmul(a, b).unwrap();
            let ct = g.transpose(c).unwrap();
            let sum = g.add(ab, ct).unwrap();
            let diff = g.sub(sum, ct).unwrap();
            let out = weighted_scalar(&mut g, rng, diff);
            assert_fd(&g, out, seed, "matmul/transpose/add/sub");
        }

        // elementwise mul + row/col/scalar broadcasts
        {
            let mut g = G::new();
            let a = g.param("a", rand_tensor(rng, &[3, 4], -1.0, 1.0)).unwrap();
            let b = g.param("b", rand_tensor(rng, &[3, 4], -1.0, 1.0)).unwrap();
            let rv = g.param("rv", rand_tensor(rng, &[4], 0.5, 1.5)).unwrap();
            let cv = g.param("cv", rand_tensor(rng, &[3], 0.5, 1.5)).unwrap();
            let s = g.param("s", rand_tensor(rng, &[], 0.5, 1.5)).unwrap();
            let m = g.mul(a, b).unwrap();
            let m = g.add_row_vec(m, rv).unwrap();
            let m = g.mul_row_vec(m, rv).unwrap();
            let m = g.mul_col_vec(m, cv).unwrap();
            let m = g.mul_scalar(m, s).unwrap();
            let m = g.scale(m, 0.7).unwrap();
            let m = g.add_const(m, 0.1).unwrap();
            let out = weighted_scalar(&mut g, rng, m);
            assert_fd(&g, out, seed, "hadamard/broadcast family");
        }

        // exp/ln/sqrt/sigmoid on safe ranges, relu/clamp away from kinks
        {
            let mut g = G::new();
            let pos = g.param("pos", rand_tensor(rng, &[2, 3], 0.5, 2.0)).unwrap();
            let any = g.param("any", rand_tensor(rng, &[2, 3], -2.0, 2.0)).unwrap();
            let e = g.exp(any).unwrap();
            let l = g.ln(pos).unwrap();
            let sq = g.sqrt(pos).unwrap();
            let sg = g.sigmoid(any).unwrap();
            let cat = g.concat_cols(&[e, l, sq, sg]).unwrap();
            let out = weighted_scalar(&mut g, rng, cat);
            assert_fd(&g, out, seed, "exp/ln/sqrt/sigmoid/concat_cols");
        }
        {
            let mut g = G::new();
            // keep inputs at least 0.2 away from the relu/clamp kink
            let raw = rand_tensor(rng, &[2, 3], 0.2, 1.0);
            let signs = rand_tensor(rng, &[2, 3], -1.0, 1.0)
                .map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let a = g.param("a", raw.zip_map(&signs, |x, s| x * s)).unwrap();
            let r = g.relu(a).unwrap();
            let c = g.clamp_min(a, 0.0).unwrap();
            let both = g.concat_rows(&[r, c]).unwrap();
            let out = weighted_scalar(&mut g, rng, both);
            assert_fd(&g, out, seed, "relu/clamp_min/concat_rows");
        }

        // softmax + layer norm
        {
            let mut g = G::new();
            let a = g.param("a", rand_tensor(rng, &[3, 5], -2.0, 2.0)).unwrap();
            let sm = g.softmax_rows(a).unwrap();
            let ln = g.layer_norm_rows(a).unwrap();
            let both = g.concat_cols(&[sm, ln]).unwrap();
            let out = weighted_scalar(&mut g, rng, both);
            assert_fd(&g, out, seed, "softmax/layer_norm");
        }

        // multi-head attention with key masking
        {
            let mut g = G::new();
            let q = g.param("q", rand_tensor(rng, &[4, 6], -1.0, 1.0)).unwrap();
            let k = g.param("k", rand_tensor(rng, &[4, 6], -1.0, 1.0)).unwrap();
            let v = g.param("v", rand_tensor(rng, &[4, 6], -1.0, 1.0)).unwrap();
            let att = g.attention(q, k, v, 3, 3).unwrap();
            let out = weighted_scalar(&mut g, rng, att);
            assert_fd(&g, out, seed, "attention");
        }

        // gather + cross entropy + bernoulli log-lik
        {
            let mut g = G::new();
            let table = g
                .param("table", rand_tensor(rng, &[5, 3], -1.0, 1.0))
                .unwrap();
            let gathered = g.gather_rows(table, vec![0, 2, 2, 4]).unwrap();
            let ce = g.cross_entropy_mean(gathered, vec![0, 2, 1, 0]).unwrap();
            let ll = g.bernoulli_log_lik(gathered, vec![1, 0, 1, 0]).unwrap();
            let lls = weighted_scalar(&mut g, rng, ll);
            let out = g.add(ce, lls).unwrap();
            assert_fd(&g, out, seed, "gather/cross_entropy/bernoulli");
        }

        // cholesky + solves + diag + reductions
        {
            let mut g = G::new();
            let k = g.param("k", rand_spd(rng, 3)).unwrap();
            let b = g.param("b", rand_tensor(rng, &[3, 2], -1.0, 1.0)).unwrap();
            let l = g.cholesky(k).unwrap();
            let x = g.solve_lower(l, b).unwrap();
            let y = g.solve_lower_t(l, x).unwrap();
            let d = g.diag_part(l).unwrap();
            let ld = g.ln(d).unwrap();
            let logdet = g.sum_all(ld).unwrap();
            let ys = weighted_scalar(&mut g, rng, y);
            let out = g.add(ys, logdet).unwrap();
            assert_fd(&g, out, seed, "cholesky/solves/diag");
        }

        // pairwise sq dist + sum_rows + mean_all
        {
            let mut g = G::new();
            let a = g.param("a", rand_tensor(rng, &[3, 2], -1.0, 1.0)).unwrap();
            let b = g.param("b", rand_tensor(rng, &[4, 2], -1.0, 1.0)).unwrap();
            let d = g.pairwise_sq_dist(a, b).unwrap();
            let k = g.scale(d, -0.5).unwrap();
            let k = g.exp(k).unwrap();
            let rows = g.sum_rows(k).unwrap();
            let rv = g.constant(rand_tensor(rng, &[3], 0.5, 1.5));
            let weighted = g.mul(rows, rv).unwrap();
            let s1 = g.sum_all(weighted).unwrap();
            let s2 = g.mean_all(k).unwrap();
            let out = g.add(s1, s2).unwrap();
            assert_fd(&g, out, seed, "pairwise_sq_dist/sum_rows/mean_all");
        }
    }
}

// ---- distributional invariants --------------------------------------------

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);
        let x = rand_tensor(rng, &[rows, cols], -5.0, 5.0);
        let mut g = G::new();
        let c = g.constant(x);
        let sm = g.softmax_rows(c).unwrap();
        let eval = g.evaluate(&no_bindings()).unwrap();
        let y = eval.value(sm);
        for i in 0..rows {
            let sum: f64 = y.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..6, cols in 2usize..10, seed in 0u64..1000) {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);
        let x = rand_tensor(rng, &[rows, cols], -3.0, 3.0);
        let mut g = G::new();
        let c = g.constant(x);
        let ln = g.layer_norm_rows(c).unwrap();
        let eval = g.evaluate(&no_bindings()).unwrap();
        let y = eval.value(ln);
        let m = cols as f64;
        for i in 0..rows {
            let mean: f64 = y.row(i).iter().sum::<f64>() / m;
            let var: f64 = y.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-7);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
