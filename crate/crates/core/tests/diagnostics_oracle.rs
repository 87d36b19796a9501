use nalgebra::DMatrix;
use qrnn::cells::{CellConfig, CellKind, Network};
use qrnn::diagnostics::{jacobian, spectral_radius, stability_sweep, SweepConfig};
use qrnn::numerics::{Activation, Matrix, Rng};

fn dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn max_singular(m: &Matrix) -> f64 {
    dense(m).singular_values().max()
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = Rng::new(21);
    for kind in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm] {
        let mut cfg = CellConfig::new(kind, 3, 8);
        cfg.activation = Activation::Tanh;
        let mut net = Network::new(cfg, 2, &mut rng).unwrap();
        for g in &mut net.groups {
            g.master = g.master.map(|_| 0.5 * rng.normal());
            g.quantized = g.master.clone();
        }
        let x = Matrix::from_fn(1, 3, |_, _| rng.normal());
        let h0 = Matrix::from_fn(1, 8, |_, _| 0.5 * rng.normal());
        let c0 = Matrix::from_fn(1, 8, |_, _| 0.5 * rng.normal());
        let step = |h: &Matrix| {
            net.forward(std::slice::from_ref(&x), Some(h), Some(&c0), None)
                .unwrap()
                .steps[0]
                .h
                .clone()
        };
        let trace = net.forward(std::slice::from_ref(&x), Some(&h0), Some(&c0), None).unwrap();
        let j = jacobian(&net, &trace, 1, 0).unwrap();
        let eps = 1e-6;
        let mut fd = Matrix::zeros(8, 8);
        for k in 0..8 {
            let mut up = h0.clone();
            up.set(0, k, h0.get(0, k) + eps);
            let mut down = h0.clone();
            down.set(0, k, h0.get(0, k) - eps);
            let (a, b) = (step(&up), step(&down));
            for i in 0..8 {
                fd.set(i, k, (a.get(0, i) - b.get(0, i)) / (2.0 * eps));
            }
        }
        let rel = j.sub(&fd).unwrap().frobenius_norm() / fd.frobenius_norm();
        assert!(rel < 1e-4, "{kind:?}: relative error {rel:e}");
    }
}

#[test]
fn relu_jacobian_matches_finite_differences_away_from_kinks() {
    let mut rng = Rng::new(22);
    let mut net = Network::new(CellConfig::new(CellKind::Vanilla, 2, 6), 2, &mut rng).unwrap();
    for g in &mut net.groups {
        g.master = g.master.map(|_| rng.normal());
        g.quantized = g.master.clone();
    }
    let x = Matrix::from_fn(1, 2, |_, _| rng.normal());
    let h0 = Matrix::from_fn(1, 6, |_, _| rng.normal());
    let trace = net.forward(std::slice::from_ref(&x), Some(&h0), None, None).unwrap();
    let pre = trace.steps[0].pre.clone().unwrap();
    assert!(pre.data().iter().all(|v| v.abs() > 1e-3));
    let j = jacobian(&net, &trace, 1, 0).unwrap();
    let eps = 1e-7;
    for k in 0..6 {
        let mut up = h0.clone();
        up.set(0, k, h0.get(0, k) + eps);
        let mut down = h0.clone();
        down.set(0, k, h0.get(0, k) - eps);
        let a = net.forward(std::slice::from_ref(&x), Some(&up), None, None).unwrap().steps[0].h.clone();
        let b = net.forward(std::slice::from_ref(&x), Some(&down), None, None).unwrap().steps[0].h.clone();
        for i in 0..6 {
            let fd = (a.get(0, i) - b.get(0, i)) / (2.0 * eps);
            assert!((fd - j.get(i, k)).abs() < 1e-6);
        }
    }
}

#[test]
fn power_iteration_matches_dense_svd() {
    let mut rng = Rng::new(23);
    let sign = Matrix::from_fn(64, 64, |_, _| if rng.bernoulli(0.5) { 1.0 } else { -1.0 });
    let est = spectral_radius(&sign, 200, &mut rng).unwrap();
    let exact = max_singular(&sign);
    assert!((est - exact).abs() / exact < 0.01, "{est} vs {exact}");

    for n in [5, 17, 40, 128] {
        let m = Matrix::from_fn(n, n, |_, _| rng.normal());
        let est = spectral_radius(&m, 300, &mut rng).unwrap();
        let exact = max_singular(&m);
        assert!((est - exact).abs() / exact < 0.01, "n={n}: {est} vs {exact}");
        assert!(est <= exact * (1.0 + 1e-12));
    }
}

#[test]
fn singular_value_bounds_eigenvalue_magnitudes() {
    let mut rng = Rng::new(24);
    for _ in 0..10 {
        let m = Matrix::from_fn(12, 12, |_, _| rng.normal());
        let eig = dense(&m).complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        let est = spectral_radius(&m, 300, &mut rng).unwrap();
        assert!(est >= eig * 0.99);
    }
}

#[test]
fn binary_recurrence_has_larger_radius_than_ternary() {
    let cell = CellConfig::new(CellKind::Vanilla, 8, 64);
    for seed in 0..5 {
        let cfg = SweepConfig {
            seed,
            include_baseline: false,
            ..SweepConfig::default()
        };
        let traces = stability_sweep(&cell, &cfg).unwrap();
        let (binary, ternary) = (&traces[0], &traces[1]);
        assert_eq!(binary.label, "binary_stoch");
        assert!(binary.mean_radius() > ternary.mean_radius(), "seed {seed}");
    }
}
