use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_rows, Matrix};

use super::{gate_groups, CellConfig, CellKind, Network, WeightGroup};

/// Values recorded at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub x: Matrix,
    /// Hidden state after the step (`s_t` for GRU).
    pub h: Matrix,
    /// LSTM cell state.
    pub c: Option<Matrix>,
    /// Vanilla pre-activation.
    pub pre: Option<Matrix>,
    /// GRU: `[z, r, candidate]`. LSTM: `[i, f, o, g]`.
    pub gates: Vec<Matrix>,
    /// Rows that were updated; `None` means all.
    pub active: Option<Vec<bool>>,
}

impl Step {
    pub fn is_active(&self, row: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[row])
    }
}

/// Everything the backward pass and the diagnostics need from a forward run.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrace {
    pub kind: CellKind,
    pub h0: Matrix,
    pub c0: Option<Matrix>,
    pub steps: Vec<Step>,
}

impl StateTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State entering step `t` (0-based), i.e. `h_{t}` in 1-based terms of
    /// the previous step; `prev_h(0)` is `h0`.
    pub fn prev_h(&self, t: usize) -> &Matrix {
        if t == 0 {
            &self.h0
        } else {
            &self.steps[t - 1].h
        }
    }

    pub fn prev_c(&self, t: usize) -> Option<&Matrix> {
        if t == 0 {
            self.c0.as_ref()
        } else {
            self.steps[t - 1].c.as_ref()
        }
    }

    pub fn hidden_states(&self) -> impl Iterator<Item = &Matrix> {
        self.steps.iter().map(|s| &s.h)
    }

    pub fn last_h(&self) -> &Matrix {
        self.steps.last().map_or(&self.h0, |s| &s.h)
    }
}

fn check_inputs(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    x_seq: &[Matrix],
    h0: &Matrix,
    mask: Option<&[Vec<bool>]>,
) -> Result<usize> {
    if weights.len() < cfg.group_count() {
        return Err(Error::format(
            "cell weights",
            format!("need {} groups, got {}", cfg.group_count(), weights.len()),
        ));
    }
    let batch = h0.rows();
    if h0.cols() != cfg.hidden_size {
        return Err(Error::Shape {
            op: "initial state",
            lhs: (batch, cfg.hidden_size),
            rhs: h0.shape(),
        });
    }
    for x in x_seq {
        if x.shape() != (batch, cfg.input_size) {
            return Err(Error::Shape {
                op: "input step",
                lhs: (batch, cfg.input_size),
                rhs: x.shape(),
            });
        }
    }
    if let Some(mask) = mask {
        if mask.len() != x_seq.len() || mask.iter().any(|m| m.len() != batch) {
            return Err(Error::Data(format!(
                "mask must be {} steps of {} rows",
                x_seq.len(),
                batch
            )));
        }
    }
    Ok(batch)
}

/// `x · W_xᵀ + h · W_hᵀ + b` for gate `k`.
fn gate_affine(
    kind: CellKind,
    weights: &[WeightGroup],
    k: usize,
    x: &Matrix,
    h: &Matrix,
) -> Result<Matrix> {
    let (xi, hi, bi) = gate_groups(kind, k);
    let mut a = x.matmul_bt(&weights[xi].quantized)?;
    a.add_assign(&h.matmul_bt(&weights[hi].quantized)?)?;
    a.add_row_broadcast(&weights[bi].quantized)?;
    Ok(a)
}

/// Copies `prev` rows into `next` wherever the mask is off.
fn carry_inactive(next: &mut Matrix, prev: &Matrix, active: Option<&Vec<bool>>) {
    if let Some(active) = active {
        for (row, &on) in active.iter().enumerate() {
            if !on {
                next.row_mut(row).copy_from_slice(prev.row(row));
            }
        }
    }
}

pub(crate) fn run_vanilla(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    x_seq: &[Matrix],
    h0: &Matrix,
    mask: Option<&[Vec<bool>]>,
) -> Result<StateTrace> {
    check_inputs(cfg, weights, x_seq, h0, mask)?;
    let act = cfg.activation;
    let mut steps: Vec<Step> = Vec::with_capacity(x_seq.len());
    for (t, x) in x_seq.iter().enumerate() {
        let prev = steps.last().map_or(h0, |s| &s.h);
        let pre = gate_affine(CellKind::Vanilla, weights, 0, x, prev)?;
        let mut h = pre.map(|v| act.apply(v));
        let active = mask.map(|m| m[t].clone());
        carry_inactive(&mut h, prev, active.as_ref());
        steps.push(Step {
            x: x.clone(),
            h,
            c: None,
            pre: Some(pre),
            gates: Vec::new(),
            active,
        });
    }
    Ok(StateTrace {
        kind: CellKind::Vanilla,
        h0: h0.clone(),
        c0: None,
        steps,
    })
}

/// Vanilla recurrence followed by the softmax readout:
/// `h_t = act(Ω(W_hh) h_{t-1} + Ω(W_xh) x_t + b_h)`,
/// `p_t = softmax(Ω(W_out) h_t + b_out)`.
pub fn vanilla_forward(
    net: &Network,
    x_seq: &[Matrix],
    h0: &Matrix,
) -> Result<(StateTrace, Vec<Matrix>)> {
    if net.cell.kind != CellKind::Vanilla {
        return Err(Error::config("cell.kind", "vanilla_forward needs a vanilla cell"));
    }
    let trace = run_vanilla(&net.cell, net.cell_groups(), x_seq, h0, None)?;
    let probs = trace
        .hidden_states()
        .map(|h| net.logits(h).map(|z| softmax_rows(&z)))
        .collect::<Result<Vec<_>>>()?;
    Ok((trace, probs))
}

/// GRU recurrence with logistic gates:
///
/// ```text
/// z_t = σ(Ω(W_xz) x_t + Ω(W_hz) s_{t-1} + b_z)
/// r_t = σ(Ω(W_xr) x_t + Ω(W_hr) s_{t-1} + b_r)
/// h_t = tanh(Ω(W_xh) x_t + Ω(W_hh) (s_{t-1} ⊙ r_t) + b_h)
/// s_t = (1 - z_t) ⊙ h_t + z_t ⊙ s_{t-1}
/// ```
pub fn gru_forward(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    x_seq: &[Matrix],
    s0: &Matrix,
    mask: Option<&[Vec<bool>]>,
) -> Result<StateTrace> {
    if cfg.kind != CellKind::Gru {
        return Err(Error::config("cell.kind", "gru_forward needs a GRU cell"));
    }
    check_inputs(cfg, weights, x_seq, s0, mask)?;
    let kind = CellKind::Gru;
    let (wx_h, wh_h, b_h) = gate_groups(kind, 2);
    let mut steps: Vec<Step> = Vec::with_capacity(x_seq.len());
    for (t, x) in x_seq.iter().enumerate() {
        let prev = steps.last().map_or(s0, |s| &s.h);
        let z = gate_affine(kind, weights, 0, x, prev)?.map(sigmoid);
        let r = gate_affine(kind, weights, 1, x, prev)?.map(sigmoid);
        let reset = prev.hadamard(&r)?;
        let mut a = x.matmul_bt(&weights[wx_h].quantized)?;
        a.add_assign(&reset.matmul_bt(&weights[wh_h].quantized)?)?;
        a.add_row_broadcast(&weights[b_h].quantized)?;
        let cand = a.map(f64::tanh);
        let mut s = Matrix::from_fn(prev.rows(), prev.cols(), |i, j| {
            let zv = z.get(i, j);
            (1.0 - zv) * cand.get(i, j) + zv * prev.get(i, j)
        });
        let active = mask.map(|m| m[t].clone());
        carry_inactive(&mut s, prev, active.as_ref());
        steps.push(Step {
            x: x.clone(),
            h: s,
            c: None,
            pre: None,
            gates: vec![z, r, cand],
            active,
        });
    }
    Ok(StateTrace {
        kind,
        h0: s0.clone(),
        c0: None,
        steps,
    })
}

/// Standard LSTM without peepholes:
///
/// ```text
/// i, f, o = σ(Ω(W_x·) x_t + Ω(W_h·) h_{t-1} + b_·),  g = tanh(...)
/// c_t = f ⊙ c_{t-1} + i ⊙ g,   h_t = o ⊙ tanh(c_t)
/// ```
pub fn lstm_forward(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    x_seq: &[Matrix],
    h0: &Matrix,
    c0: &Matrix,
    mask: Option<&[Vec<bool>]>,
) -> Result<StateTrace> {
    if cfg.kind != CellKind::Lstm {
        return Err(Error::config("cell.kind", "lstm_forward needs an LSTM cell"));
    }
    check_inputs(cfg, weights, x_seq, h0, mask)?;
    if c0.shape() != h0.shape() {
        return Err(Error::Shape {
            op: "initial cell state",
            lhs: h0.shape(),
            rhs: c0.shape(),
        });
    }
    let kind = CellKind::Lstm;
    let mut steps: Vec<Step> = Vec::with_capacity(x_seq.len());
    for (t, x) in x_seq.iter().enumerate() {
        let (h_prev, c_prev) = match steps.last() {
            Some(s) => (&s.h, s.c.as_ref().expect("lstm step has cell state")),
            None => (h0, c0),
        };
        let i = gate_affine(kind, weights, 0, x, h_prev)?.map(sigmoid);
        let f = gate_affine(kind, weights, 1, x, h_prev)?.map(sigmoid);
        let o = gate_affine(kind, weights, 2, x, h_prev)?.map(sigmoid);
        let g = gate_affine(kind, weights, 3, x, h_prev)?.map(f64::tanh);
        let mut c = Matrix::from_fn(h_prev.rows(), h_prev.cols(), |r, j| {
            f.get(r, j) * c_prev.get(r, j) + i.get(r, j) * g.get(r, j)
        });
        let mut h = Matrix::from_fn(c.rows(), c.cols(), |r, j| o.get(r, j) * c.get(r, j).tanh());
        let active = mask.map(|m| m[t].clone());
        carry_inactive(&mut c, c_prev, active.as_ref());
        carry_inactive(&mut h, h_prev, active.as_ref());
        steps.push(Step {
            x: x.clone(),
            h,
            c: Some(c),
            pre: None,
            gates: vec![i, f, o, g],
            active,
        });
    }
    Ok(StateTrace {
        kind,
        h0: h0.clone(),
        c0: Some(c0.clone()),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{Role, Scope};
    use crate::numerics::Rng;

    fn vanilla_unit(w_hh: f64, w_xh: f64) -> Network {
        let cell = CellConfig::new(CellKind::Vanilla, 1, 1);
        let g = |name: &str, role, v: f64| WeightGroup::new(name, role, Matrix::filled(1, 1, v));
        let groups = vec![
            g("w_xh", Role::Input, w_xh),
            g("w_hh", Role::Recurrent, w_hh),
            g("b_h", Role::Bias, 0.0),
            WeightGroup::new("w_out", Role::Output, Matrix::zeros(2, 1)),
            WeightGroup::new("b_out", Role::OutputBias, Matrix::zeros(1, 2)),
        ];
        Network::from_groups(cell, 2, groups).unwrap()
    }

    fn seq(values: &[f64]) -> Vec<Matrix> {
        values.iter().map(|&v| Matrix::filled(1, 1, v)).collect()
    }

    #[test]
    fn vanilla_hand_unroll() {
        let net = vanilla_unit(1.0, 1.0);
        let (trace, _) = vanilla_forward(&net, &seq(&[1.0, 1.0]), &Matrix::zeros(1, 1)).unwrap();
        let hs: Vec<f64> = trace.hidden_states().map(|h| h.get(0, 0)).collect();
        assert_eq!(hs, [1.0, 2.0]);
    }

    #[test]
    fn zero_network_is_silent_and_uniform() {
        let mut net = vanilla_unit(0.0, 0.0);
        net.groups[3].master = Matrix::zeros(2, 1);
        let (trace, probs) =
            vanilla_forward(&net, &seq(&[3.0, -1.0, 2.0]), &Matrix::zeros(1, 1)).unwrap();
        assert!(trace.hidden_states().all(|h| h.get(0, 0) == 0.0));
        assert!(probs.iter().all(|p| p.data() == [0.5, 0.5]));
    }

    fn zero_gru(hidden: usize) -> (CellConfig, Vec<WeightGroup>) {
        let cell = CellConfig::new(CellKind::Gru, 1, hidden);
        let mut rng = Rng::new(0);
        let mut net = Network::new(cell.clone(), 1, &mut rng).unwrap();
        for g in &mut net.groups {
            g.master = Matrix::zeros(g.master.rows(), g.master.cols());
            g.quantized = g.master.clone();
        }
        (cell, net.groups)
    }

    #[test]
    fn gru_zero_weights_halve_state() {
        let (cell, w) = zero_gru(2);
        let trace = gru_forward(&cell, &w, &seq(&[0.7, -0.3]), &Matrix::filled(1, 2, 1.0), None)
            .unwrap();
        let z = &trace.steps[0].gates[0];
        assert!(z.data().iter().all(|&v| v == 0.5));
        assert!(trace.steps[0].gates[1].data().iter().all(|&v| v == 0.5));
        assert!(trace.steps[0].gates[2].data().iter().all(|&v| v == 0.0));
        assert!(trace.steps[0].h.data().iter().all(|&v| v == 0.5));
        assert!(trace.steps[1].h.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gru_saturated_update_gate_carries_state() {
        let (cell, mut w) = zero_gru(3);
        w[6].quantized = Matrix::filled(1, 3, 50.0); // b_z
        w[0].quantized = Matrix::filled(3, 1, 0.4); // w_xz
        w[2].quantized = Matrix::filled(3, 1, 2.0); // w_xh
        let s0 = Matrix::row_vector(&[0.3, -0.2, 0.9]);
        let trace = gru_forward(&cell, &w, &seq(&[1.0, -2.0, 0.5, 3.0]), &s0, None).unwrap();
        for h in trace.hidden_states() {
            assert_eq!(h, &s0);
        }
    }

    #[test]
    fn lstm_saturated_forget_gate_carries_cell() {
        let cell = CellConfig::new(CellKind::Lstm, 1, 2);
        let mut net = Network::new(cell.clone(), 1, &mut Rng::new(0)).unwrap();
        for g in &mut net.groups {
            g.quantized = Matrix::zeros(g.master.rows(), g.master.cols());
        }
        net.groups[9].quantized = Matrix::filled(1, 2, 20.0); // b_f
        let ones = Matrix::filled(1, 2, 1.0);
        let trace = lstm_forward(
            &cell,
            net.cell_groups(),
            &seq(&[1.0; 10]),
            &Matrix::zeros(1, 2),
            &ones,
            None,
        )
        .unwrap();
        for s in &trace.steps {
            for &c in s.c.as_ref().unwrap().data() {
                assert!((c - 1.0).abs() < 1e-6, "{c}");
            }
        }
    }

    #[test]
    fn lstm_zero_network_stays_zero() {
        let cell = CellConfig::new(CellKind::Lstm, 2, 3);
        let mut net = Network::new(cell.clone(), 1, &mut Rng::new(0)).unwrap();
        for g in &mut net.groups {
            g.quantized = Matrix::zeros(g.master.rows(), g.master.cols());
        }
        let x = vec![Matrix::filled(1, 2, 1.5); 4];
        let zeros = Matrix::zeros(1, 3);
        let trace = lstm_forward(&cell, net.cell_groups(), &x, &zeros, &zeros, None).unwrap();
        assert!(trace.hidden_states().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn masked_rows_keep_their_state() {
        let mut rng = Rng::new(4);
        let net = Network::new(CellConfig::new(CellKind::Gru, 2, 3), 2, &mut rng).unwrap();
        let x: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_fn(2, 2, |_, _| rng.normal()))
            .collect();
        let mask = vec![vec![false, true], vec![true, true], vec![true, false]];
        let trace = net.forward(&x, None, None, Some(&mask)).unwrap();
        assert_eq!(trace.steps[0].h.row(0), &[0.0; 3]);
        assert_eq!(trace.steps[2].h.row(1), trace.steps[1].h.row(1));
    }

    #[test]
    fn shape_errors_are_reported() {
        let net = vanilla_unit(1.0, 1.0);
        let bad = vec![Matrix::zeros(1, 3)];
        assert!(vanilla_forward(&net, &bad, &Matrix::zeros(1, 1)).is_err());
        assert!(vanilla_forward(&net, &seq(&[1.0]), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn identity_quantizer_is_transparent() {
        let mut rng = Rng::new(6);
        let cell = CellConfig::new(CellKind::Lstm, 3, 4);
        let plain = Network::new(cell.clone(), 2, &mut Rng::new(1)).unwrap();
        let mut quant = Network::new(
            cell.with_scope(Scope::all(crate::quantize::QuantizerSpec::identity())),
            2,
            &mut Rng::new(1),
        )
        .unwrap();
        quant.refresh(crate::cells::Sampling::Training, &mut rng);
        let x: Vec<Matrix> = (0..5).map(|_| Matrix::from_fn(2, 3, |_, _| rng.normal())).collect();
        let a = plain.forward(&x, None, None, None).unwrap();
        let b = quant.forward(&x, None, None, None).unwrap();
        assert_eq!(a, b);
    }
}
