use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vssam_core::model::{
    augmented_gram, finite_diff_gradient, forward_loss, gradient, smoothness_constant, Batch, ModelSpec,
};
use vssam_core::ParamVector;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> Batch {
    let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, labels, d).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..dim).map(|_| rng.random_range(-scale..scale)).collect())
}

fn random_spec(rng: &mut ChaCha8Rng, which: usize) -> ModelSpec {
    let d = rng.random_range(1..5);
    let l2 = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.5) };
    match which % 3 {
        0 => ModelSpec::quadratic(random_params(rng, d, 3.0)).with_l2(l2),
        1 => ModelSpec::logistic(d, rng.random_range(2..5)).with_l2(l2),
        _ => ModelSpec::mlp2(d, rng.random_range(1..5), rng.random_range(2..4)).with_l2(l2),
    }
}

fn rel_error(a: &ParamVector, b: &ParamVector) -> f64 {
    a.sub(b).norm() / a.norm().max(1.0)
}

#[test]
fn analytic_matches_finite_difference_on_100_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let spec = random_spec(&mut rng, trial);
        let n = rng.random_range(1..6);
        let batch = random_batch(&mut rng, n, spec.input_dim, spec.num_classes);
        let params = random_params(&mut rng, spec.param_dim(), 1.5);
        let g = gradient(&spec, &params, &batch).unwrap();
        let fd = finite_diff_gradient(&spec, &params, &batch, 1e-6).unwrap();
        let err = rel_error(&g, &fd);
        worst = worst.max(err);
        assert!(err < 1e-5, "trial {trial} ({:?}): rel error {err}", spec.kind);
    }
    assert!(worst < 1e-5);
}

#[test]
fn quadratic_gradient_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_params(&mut rng, 6, 2.0);
    let spec = ModelSpec::quadratic(c);
    let batch = random_batch(&mut rng, 1, 6, 2);
    for _ in 0..20 {
        let a = random_params(&mut rng, 6, 4.0);
        let b = random_params(&mut rng, 6, 4.0);
        let diff = gradient(&spec, &a, &batch).unwrap().sub(&gradient(&spec, &b, &batch).unwrap());
        assert!(diff.max_abs_diff(&a.sub(&b)) < 1e-12);
    }
}

proptest! {
    #[test]
    fn quadratic_descent_lemma(
        c in prop::collection::vec(-3.0f64..3.0, 3),
        start in prop::collection::vec(-10.0f64..10.0, 3),
        l2 in 0.0f64..2.0,
    ) {
        let spec = ModelSpec::quadratic(ParamVector::from_vec(c)).with_l2(l2);
        let batch = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        let theta = ParamVector::from_vec(start);
        let l = smoothness_constant(&spec, &batch).unwrap();
        let g = gradient(&spec, &theta, &batch).unwrap();
        let mut next = theta.clone();
        next.axpy(-1.0 / l, &g);
        let before = forward_loss(&spec, &theta, &batch).unwrap();
        let after = forward_loss(&spec, &next, &batch).unwrap();
        // F(θ − g/L) ≤ F(θ) − ‖g‖²/(2L)
        prop_assert!(after <= before - g.norm_sq() / (2.0 * l) + 1e-9 * before.max(1.0));
    }

    #[test]
    fn logistic_gradient_matches_fd(
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::logistic(3, 3);
        let batch = random_batch(&mut rng, 4, 3, 3);
        let params = random_params(&mut rng, spec.param_dim(), 2.0);
        let g = gradient(&spec, &params, &batch).unwrap();
        let fd = finite_diff_gradient(&spec, &params, &batch, 1e-6).unwrap();
        prop_assert!(rel_error(&g, &fd) < 1e-5);
    }
}

#[test]
fn logistic_smoothness_matches_dense_eigensolve() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spec = ModelSpec::logistic(4, 3).with_l2(0.05);
    let data = random_batch(&mut rng, 20, 4, 3);
    let l = smoothness_constant(&spec, &data).unwrap();

    // Build X̄ᵀX̄/n directly from the samples and solve densely.
    let m = 5;
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for i in 0..data.len() {
        let mut x = data.row(i).to_vec();
        x.push(1.0);
        let xv = DMatrix::from_column_slice(m, 1, &x);
        gram += &xv * xv.transpose();
    }
    gram /= data.len() as f64;
    let lambda = gram.clone().symmetric_eigen().eigenvalues.max();
    assert!((l - (0.5 * lambda + 0.05)).abs() <= 1e-8 * l, "{l} vs {}", 0.5 * lambda + 0.05);

    let flat = augmented_gram(&data);
    for a in 0..m {
        for b in 0..m {
            assert!((flat[a * m + b] - gram[(a, b)]).abs() < 1e-12);
        }
    }
}

/// Hessian-vector products by central differences of the analytic gradient.
fn hessian_matrix(spec: &ModelSpec, theta: &ParamVector, data: &Batch) -> DMatrix<f64> {
    let dim = theta.dim();
    let h = 1e-5;
    let mut hess = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        let col = gradient(spec, &plus, data).unwrap().sub(&gradient(spec, &minus, data).unwrap());
        for i in 0..dim {
            hess[(i, j)] = col[i] / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

#[test]
fn logistic_smoothness_bounds_the_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = ModelSpec::logistic(2, 3);
    let data = random_batch(&mut rng, 12, 2, 3);
    let l = smoothness_constant(&spec, &data).unwrap();
    let mut max_seen: f64 = 0.0;
    for _ in 0..200 {
        let theta = random_params(&mut rng, spec.param_dim(), 4.0);
        let top = hessian_matrix(&spec, &theta, &data).symmetric_eigen().eigenvalues.max();
        max_seen = max_seen.max(top);
        assert!(top <= l * (1.0 + 1e-6), "Hessian eigenvalue {top} exceeds L = {l}");
    }
    assert!(max_seen > 0.0);
}

#[test]
fn quarter_factor_would_not_bound_the_hessian() {
    // One sample x = 0 (bias only) with two classes tied at p = (½, ½): the
    // bias Hessian is diag(p) − ppᵀ with top eigenvalue ½, twice ¼·λ_max(X̄ᵀX̄/n).
    let spec = ModelSpec::logistic(1, 2);
    let data = Batch::new(vec![0.0], vec![0], 1).unwrap();
    let theta = ParamVector::zeros(4);
    let top = hessian_matrix(&spec, &theta, &data).symmetric_eigen().eigenvalues.max();
    assert!((top - 0.5).abs() < 1e-6);
    let l = smoothness_constant(&spec, &data).unwrap();
    assert!((l - 0.5).abs() < 1e-12);
}
