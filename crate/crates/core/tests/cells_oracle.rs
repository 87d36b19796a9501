use proptest::prelude::*;
use qrnn::cells::{CellConfig, CellKind, Network, Sampling, Scope};
use qrnn::numerics::{Activation, Matrix, Rng};
use qrnn::quantize::{QuantizerSpec, Variant};

type Vector = Vec<f64>;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mv(w: &Matrix, v: &[f64]) -> Vector {
    (0..w.rows())
        .map(|i| (0..w.cols()).map(|j| w.get(i, j) * v[j]).sum())
        .collect()
}

/// Pre-activation of gate `k` for one sample, using the quantized images.
fn affine(net: &Network, k: usize, x: &[f64], h: &[f64]) -> Vector {
    let n = net.cell.kind.gate_count();
    let g = &net.groups;
    let a = mv(&g[k].quantized, x);
    let b = mv(&g[n + k].quantized, h);
    let bias = g[2 * n + k].quantized.row(0);
    a.iter().zip(&b).zip(bias).map(|((a, b), c)| a + b + c).collect()
}

/// Straight-line single-sample unroll; returns `(h_t, c_t)` for each step.
fn oracle(net: &Network, xs: &[Vector]) -> Vec<(Vector, Vector)> {
    let hsz = net.cell.hidden_size;
    let mut h = vec![0.0; hsz];
    let mut c = vec![0.0; hsz];
    let mut out = Vec::new();
    for x in xs {
        match net.cell.kind {
            CellKind::Vanilla => {
                let act = net.cell.activation;
                h = affine(net, 0, x, &h).into_iter().map(|v| act.apply(v)).collect();
            }
            CellKind::Gru => {
                let z: Vector = affine(net, 0, x, &h).into_iter().map(sig).collect();
                let r: Vector = affine(net, 1, x, &h).into_iter().map(sig).collect();
                let sr: Vector = h.iter().zip(&r).map(|(a, b)| a * b).collect();
                let cand: Vector = affine(net, 2, x, &sr).into_iter().map(f64::tanh).collect();
                h = (0..hsz).map(|j| (1.0 - z[j]) * cand[j] + z[j] * h[j]).collect();
            }
            CellKind::Lstm => {
                let i: Vector = affine(net, 0, x, &h).into_iter().map(sig).collect();
                let f: Vector = affine(net, 1, x, &h).into_iter().map(sig).collect();
                let o: Vector = affine(net, 2, x, &h).into_iter().map(sig).collect();
                let g: Vector = affine(net, 3, x, &h).into_iter().map(f64::tanh).collect();
                c = (0..hsz).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
                h = (0..hsz).map(|j| o[j] * c[j].tanh()).collect();
            }
        }
        out.push((h.clone(), c.clone()));
    }
    out
}

fn randomize(net: &mut Network, rng: &mut Rng, scale: f64) {
    for g in &mut net.groups {
        g.master = g.master.map(|_| scale * rng.normal());
        g.quantized = g.master.clone();
    }
}

fn inputs(rng: &mut Rng, steps: usize, batch: usize, dim: usize) -> Vec<Matrix> {
    (0..steps)
        .map(|_| Matrix::from_fn(batch, dim, |_, _| rng.normal()))
        .collect()
}

const KINDS: [CellKind; 3] = [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm];

#[test]
fn forward_matches_unrolled_oracle() {
    let mut rng = Rng::new(11);
    for kind in KINDS {
        for act in [Activation::Relu, Activation::Tanh] {
            let mut cfg = CellConfig::new(kind, 3, 5);
            cfg.activation = act;
            let mut net = Network::new(cfg, 4, &mut rng).unwrap();
            randomize(&mut net, &mut rng, 0.5);
            let xs = inputs(&mut rng, 7, 3, 3);
            let trace = net.forward(&xs, None, None, None).unwrap();
            for b in 0..3 {
                let seq: Vec<Vector> = xs.iter().map(|x| x.row(b).to_vec()).collect();
                for (t, (h, c)) in oracle(&net, &seq).iter().enumerate() {
                    let step = &trace.steps[t];
                    for j in 0..5 {
                        assert!((step.h.get(b, j) - h[j]).abs() < 1e-10, "{kind:?} h t={t}");
                        if let Some(sc) = &step.c {
                            assert!((sc.get(b, j) - c[j]).abs() < 1e-10, "{kind:?} c t={t}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn quantized_forward_matches_oracle_on_images() {
    let mut rng = Rng::new(12);
    let q = QuantizerSpec::expquant(Variant::Stochastic, -8, 0);
    for kind in KINDS {
        let cfg = CellConfig::new(kind, 2, 4).with_scope(Scope::all(q));
        let mut net = Network::new(cfg, 3, &mut rng).unwrap();
        for g in &mut net.groups {
            g.master = g.master.map(|_| 0.4 * rng.normal());
        }
        net.refresh(Sampling::Training, &mut rng);
        let xs = inputs(&mut rng, 5, 1, 2);
        let trace = net.forward(&xs, None, None, None).unwrap();
        let seq: Vec<Vector> = xs.iter().map(|x| x.row(0).to_vec()).collect();
        for (t, (h, _)) in oracle(&net, &seq).iter().enumerate() {
            for j in 0..4 {
                assert!((trace.steps[t].h.get(0, j) - h[j]).abs() < 1e-10);
            }
        }
    }
}

/// Loss `Σ_t ⟨G_t, h_t⟩` evaluated through the batched forward pass.
fn probe_loss(net: &Network, xs: &[Matrix], h0: &Matrix, probes: &[Matrix]) -> f64 {
    let trace = net.forward(xs, Some(h0), None, None).unwrap();
    trace
        .steps
        .iter()
        .zip(probes)
        .map(|(s, g)| s.h.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = Rng::new(13);
    let eps = 1e-6;
    for kind in KINDS {
        let mut cfg = CellConfig::new(kind, 3, 4);
        cfg.activation = Activation::Tanh;
        let mut net = Network::new(cfg, 2, &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.6);
        let xs = inputs(&mut rng, 6, 2, 3);
        let h0 = Matrix::from_fn(2, 4, |_, _| 0.5 * rng.normal());
        let probes: Vec<Matrix> = (0..6).map(|_| Matrix::from_fn(2, 4, |_, _| rng.normal())).collect();

        let trace = net.forward(&xs, Some(&h0), None, None).unwrap();
        let grads = net.backward(&trace, &probes).unwrap();

        let n_cell = net.cell.group_count();
        let mut worst: f64 = 0.0;
        for k in 0..n_cell {
            let shape = net.groups[k].master.shape();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = net.groups[k].quantized.get(i, j);
                    net.groups[k].quantized.set(i, j, orig + eps);
                    let up = probe_loss(&net, &xs, &h0, &probes);
                    net.groups[k].quantized.set(i, j, orig - eps);
                    let down = probe_loss(&net, &xs, &h0, &probes);
                    net.groups[k].quantized.set(i, j, orig);
                    let fd = (up - down) / (2.0 * eps);
                    worst = worst.max(rel_err(fd, grads.weights[k].get(i, j)));
                }
            }
        }
        let mut h0p = h0.clone();
        for i in 0..2 {
            for j in 0..4 {
                let orig = h0.get(i, j);
                h0p.set(i, j, orig + eps);
                let up = probe_loss(&net, &xs, &h0p, &probes);
                h0p.set(i, j, orig - eps);
                let down = probe_loss(&net, &xs, &h0p, &probes);
                h0p.set(i, j, orig);
                worst = worst.max(rel_err((up - down) / (2.0 * eps), grads.dh0.get(i, j)));
            }
        }
        assert!(worst < 1e-5, "{kind:?}: worst relative error {worst:e}");
    }
}

#[test]
fn masked_gradients_match_finite_differences() {
    let mut rng = Rng::new(14);
    let eps = 1e-6;
    for kind in KINDS {
        let mut net = Network::new(CellConfig::new(kind, 2, 3), 2, &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.6);
        let xs = inputs(&mut rng, 5, 2, 2);
        let mask: Vec<Vec<bool>> = (0..5).map(|t| vec![t >= 2, true]).collect();
        let probes: Vec<Matrix> = (0..5).map(|_| Matrix::from_fn(2, 3, |_, _| rng.normal())).collect();
        let loss = |net: &Network| {
            let tr = net.forward(&xs, None, None, Some(&mask)).unwrap();
            tr.steps
                .iter()
                .zip(&probes)
                .map(|(s, g)| s.h.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let trace = net.forward(&xs, None, None, Some(&mask)).unwrap();
        let grads = net.backward(&trace, &probes).unwrap();
        for k in 0..net.cell.group_count() {
            let (r, c) = net.groups[k].master.shape();
            for i in 0..r {
                for j in 0..c {
                    let orig = net.groups[k].quantized.get(i, j);
                    net.groups[k].quantized.set(i, j, orig + eps);
                    let up = loss(&net);
                    net.groups[k].quantized.set(i, j, orig - eps);
                    let down = loss(&net);
                    net.groups[k].quantized.set(i, j, orig);
                    let fd = (up - down) / (2.0 * eps);
                    let e = rel_err(fd, grads.weights[k].get(i, j));
                    assert!(e < 1e-5, "{kind:?} group {k}: {e:e}");
                }
            }
        }
    }
}

#[test]
fn readout_gradient_matches_finite_differences() {
    let mut rng = Rng::new(15);
    let mut net = Network::new(CellConfig::new(CellKind::Vanilla, 2, 3), 4, &mut rng).unwrap();
    randomize(&mut net, &mut rng, 0.7);
    let h = Matrix::from_fn(2, 3, |_, _| rng.normal());
    let probe = Matrix::from_fn(2, 4, |_, _| rng.normal());
    let loss = |net: &Network, h: &Matrix| {
        let z = net.logits(h).unwrap();
        z.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut gw = Matrix::zeros(4, 3);
    let mut gb = Matrix::zeros(1, 4);
    let dh = net.readout_backward(&h, &probe, &mut gw, &mut gb).unwrap();
    let eps = 1e-6;
    let w_idx = net.groups.len() - 2;
    for i in 0..4 {
        for j in 0..3 {
            let orig = net.groups[w_idx].quantized.get(i, j);
            net.groups[w_idx].quantized.set(i, j, orig + eps);
            let up = loss(&net, &h);
            net.groups[w_idx].quantized.set(i, j, orig - eps);
            let down = loss(&net, &h);
            net.groups[w_idx].quantized.set(i, j, orig);
            assert!(rel_err((up - down) / (2.0 * eps), gw.get(i, j)) < 1e-6);
        }
    }
    for j in 0..4 {
        let colsum: f64 = (0..2).map(|i| probe.get(i, j)).sum();
        assert!((gb.get(0, j) - colsum).abs() < 1e-12);
    }
    let mut hp = h.clone();
    for i in 0..2 {
        for j in 0..3 {
            hp.set(i, j, h.get(i, j) + eps);
            let up = loss(&net, &hp);
            hp.set(i, j, h.get(i, j) - eps);
            let down = loss(&net, &hp);
            hp.set(i, j, h.get(i, j));
            assert!(rel_err((up - down) / (2.0 * eps), dh.get(i, j)) < 1e-6);
        }
    }
}

#[test]
fn straight_through_gradient_ignores_master_values() {
    // Two masters with identical deterministic images get identical gradients.
    let mut rng = Rng::new(16);
    let q = QuantizerSpec::ternary(Variant::Deterministic);
    let cfg = CellConfig::new(CellKind::Lstm, 2, 3).with_scope(Scope::all(q));
    let mut a = Network::new(cfg, 2, &mut rng).unwrap();
    for g in &mut a.groups {
        g.master = g.master.map(|_| rng.uniform_range(-1.0, 1.0));
    }
    let mut b = a.clone();
    for g in b.groups.iter_mut().filter(|g| g.quantizer.is_some()) {
        // Nudge masters without crossing a ternary threshold.
        g.master = g.master.map(|w| {
            let moved = w * 0.99;
            if (w > 0.5) == (moved > 0.5) && (w <= -0.5) == (moved <= -0.5) { moved } else { w }
        });
    }
    assert_ne!(a.groups[0].master, b.groups[0].master);
    a.refresh(Sampling::Deterministic, &mut rng);
    b.refresh(Sampling::Deterministic, &mut rng);
    let xs = inputs(&mut rng, 4, 2, 2);
    let probes: Vec<Matrix> = (0..4).map(|_| Matrix::from_fn(2, 3, |_, _| rng.normal())).collect();
    let ga = a.backward(&a.forward(&xs, None, None, None).unwrap(), &probes).unwrap();
    let gb = b.backward(&b.forward(&xs, None, None, None).unwrap(), &probes).unwrap();
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gru_state_stays_in_unit_box(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let mut net = Network::new(CellConfig::new(CellKind::Gru, 3, 4), 2, &mut rng).unwrap();
        randomize(&mut net, &mut rng, scale);
        let xs: Vec<Matrix> = (0..10).map(|_| Matrix::from_fn(2, 3, |_, _| 3.0 * rng.normal())).collect();
        let h0 = Matrix::from_fn(2, 4, |_, _| rng.uniform_range(-1.0, 1.0));
        let trace = net.forward(&xs, Some(&h0), None, None).unwrap();
        for s in &trace.steps {
            prop_assert!(s.h.max_abs() <= 1.0);
        }
    }

    #[test]
    fn lstm_gates_stay_in_range(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let mut net = Network::new(CellConfig::new(CellKind::Lstm, 3, 4), 2, &mut rng).unwrap();
        randomize(&mut net, &mut rng, scale);
        let xs: Vec<Matrix> = (0..8).map(|_| Matrix::from_fn(2, 3, |_, _| 3.0 * rng.normal())).collect();
        let trace = net.forward(&xs, None, None, None).unwrap();
        for s in &trace.steps {
            for gate in &s.gates[..3] {
                prop_assert!(gate.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(s.gates[3].max_abs() <= 1.0);
            prop_assert!(s.h.max_abs() <= 1.0);
        }
    }
}
