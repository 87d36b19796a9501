use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{gate_groups, CellConfig, CellKind, StateTrace, WeightGroup};

/// Gradients of one backward pass, in cell group order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrads {
    pub weights: Vec<Matrix>,
    pub dh0: Matrix,
    pub dc0: Option<Matrix>,
}

impl CellGrads {
    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|g| g.max_abs() == 0.0) && self.dh0.max_abs() == 0.0
    }
}

/// Exact BPTT gradients with respect to the quantized images that the
/// forward pass used (never the masters), plus the initial-state gradient.
///
/// `grad_out[t]` is the loss gradient flowing into the hidden state of step
/// `t` from outside the recurrence (e.g. from the readout).
pub fn backward(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    trace: &StateTrace,
    grad_out: &[Matrix],
) -> Result<CellGrads> {
    if trace.kind != cfg.kind {
        return Err(Error::format("trace", "cell kind differs from config"));
    }
    if grad_out.len() != trace.len() {
        return Err(Error::format(
            "trace",
            format!("{} output gradients for {} steps", grad_out.len(), trace.len()),
        ));
    }
    let n_groups = cfg.group_count();
    if weights.len() < n_groups {
        return Err(Error::format("cell weights", "too few weight groups"));
    }
    let (batch, hidden) = trace.h0.shape();
    for (t, g) in grad_out.iter().enumerate() {
        if g.shape() != (batch, hidden) {
            return Err(Error::Shape {
                op: "output gradient",
                lhs: (batch, hidden),
                rhs: grad_out[t].shape(),
            });
        }
    }
    for (k, w) in weights[..n_groups].iter().enumerate() {
        let n = cfg.kind.gate_count();
        let expected = if k < n {
            (hidden, cfg.input_size)
        } else if k < 2 * n {
            (hidden, hidden)
        } else {
            (1, hidden)
        };
        if w.quantized.shape() != expected {
            return Err(Error::Shape {
                op: "trace/weights",
                lhs: expected,
                rhs: w.quantized.shape(),
            });
        }
    }

    let mut grads: Vec<Matrix> = weights[..n_groups]
        .iter()
        .map(|w| Matrix::zeros(w.quantized.rows(), w.quantized.cols()))
        .collect();
    let mut dh_next = Matrix::zeros(batch, hidden);
    let mut dc_next = (cfg.kind == CellKind::Lstm).then(|| Matrix::zeros(batch, hidden));

    for t in (0..trace.len()).rev() {
        let step = &trace.steps[t];
        let mut dh = grad_out[t].add(&dh_next)?;
        let mut dc = dc_next.take();

        // Inactive rows pass their gradient straight to the previous state.
        let mut carry_h = Matrix::zeros(batch, hidden);
        let mut carry_c = dc.as_ref().map(|_| Matrix::zeros(batch, hidden));
        if step.active.is_some() {
            for row in (0..batch).filter(|&r| !step.is_active(r)) {
                carry_h.row_mut(row).copy_from_slice(dh.row(row));
                dh.row_mut(row).fill(0.0);
                if let (Some(dc), Some(cc)) = (dc.as_mut(), carry_c.as_mut()) {
                    cc.row_mut(row).copy_from_slice(dc.row(row));
                    dc.row_mut(row).fill(0.0);
                }
            }
        }

        let h_prev = trace.prev_h(t);
        let (mut dh_prev, dc_prev) = match cfg.kind {
            CellKind::Vanilla => (vanilla_step(cfg, weights, step, h_prev, &dh, &mut grads)?, None),
            CellKind::Gru => (gru_step(weights, step, h_prev, &dh, &mut grads)?, None),
            CellKind::Lstm => {
                let c_prev = trace
                    .prev_c(t)
                    .ok_or_else(|| Error::format("trace", "LSTM trace without cell state"))?;
                let dc = dc.unwrap_or_else(|| Matrix::zeros(batch, hidden));
                let (dh_prev, dc_prev) =
                    lstm_step(weights, step, h_prev, c_prev, &dh, &dc, &mut grads)?;
                (dh_prev, Some(dc_prev))
            }
        };
        dh_prev.add_assign(&carry_h)?;
        dh_next = dh_prev;
        dc_next = match (dc_prev, carry_c) {
            (Some(mut d), Some(c)) => {
                d.add_assign(&c)?;
                Some(d)
            }
            (d, _) => d,
        };
    }

    Ok(CellGrads {
        weights: grads,
        dh0: dh_next,
        dc0: dc_next,
    })
}

/// Accumulates the weight gradients of gate `k` from its pre-activation
/// gradient `da`, returning `da · W_h` (the contribution to `dh_prev`).
fn accumulate_gate(
    kind: CellKind,
    weights: &[WeightGroup],
    k: usize,
    da: &Matrix,
    x: &Matrix,
    h_in: &Matrix,
    grads: &mut [Matrix],
) -> Result<Matrix> {
    let (xi, hi, bi) = gate_groups(kind, k);
    da.matmul_at_acc(x, &mut grads[xi])?;
    da.matmul_at_acc(h_in, &mut grads[hi])?;
    grads[bi].add_assign(&da.sum_rows())?;
    da.matmul(&weights[hi].quantized)
}

fn vanilla_step(
    cfg: &CellConfig,
    weights: &[WeightGroup],
    step: &super::Step,
    h_prev: &Matrix,
    dh: &Matrix,
    grads: &mut [Matrix],
) -> Result<Matrix> {
    let pre = step
        .pre
        .as_ref()
        .ok_or_else(|| Error::format("trace", "vanilla step without pre-activation"))?;
    let act = cfg.activation;
    let dpre = Matrix::from_fn(dh.rows(), dh.cols(), |i, j| {
        dh.get(i, j) * act.derivative(pre.get(i, j), step.h.get(i, j))
    });
    accumulate_gate(CellKind::Vanilla, weights, 0, &dpre, &step.x, h_prev, grads)
}

fn gru_step(
    weights: &[WeightGroup],
    step: &super::Step,
    s_prev: &Matrix,
    ds: &Matrix,
    grads: &mut [Matrix],
) -> Result<Matrix> {
    let kind = CellKind::Gru;
    let [z, r, cand] = match step.gates.as_slice() {
        [z, r, c] => [z, r, c],
        _ => return Err(Error::format("trace", "GRU step needs three gate values")),
    };
    let (rows, cols) = ds.shape();

    // s = (1 - z) h + z s_prev
    let da_h = Matrix::from_fn(rows, cols, |i, j| {
        let c = cand.get(i, j);
        ds.get(i, j) * (1.0 - z.get(i, j)) * (1.0 - c * c)
    });
    let da_z = Matrix::from_fn(rows, cols, |i, j| {
        let zv = z.get(i, j);
        ds.get(i, j) * (s_prev.get(i, j) - cand.get(i, j)) * zv * (1.0 - zv)
    });

    let reset = s_prev.hadamard(r)?;
    let d_reset = accumulate_gate(kind, weights, 2, &da_h, &step.x, &reset, grads)?;
    let da_r = Matrix::from_fn(rows, cols, |i, j| {
        let rv = r.get(i, j);
        d_reset.get(i, j) * s_prev.get(i, j) * rv * (1.0 - rv)
    });

    let mut ds_prev = Matrix::from_fn(rows, cols, |i, j| {
        ds.get(i, j) * z.get(i, j) + d_reset.get(i, j) * r.get(i, j)
    });
    ds_prev.add_assign(&accumulate_gate(kind, weights, 0, &da_z, &step.x, s_prev, grads)?)?;
    ds_prev.add_assign(&accumulate_gate(kind, weights, 1, &da_r, &step.x, s_prev, grads)?)?;
    Ok(ds_prev)
}

fn lstm_step(
    weights: &[WeightGroup],
    step: &super::Step,
    h_prev: &Matrix,
    c_prev: &Matrix,
    dh: &Matrix,
    dc_in: &Matrix,
    grads: &mut [Matrix],
) -> Result<(Matrix, Matrix)> {
    let kind = CellKind::Lstm;
    let [i, f, o, g] = match step.gates.as_slice() {
        [i, f, o, g] => [i, f, o, g],
        _ => return Err(Error::format("trace", "LSTM step needs four gate values")),
    };
    let c = step
        .c
        .as_ref()
        .ok_or_else(|| Error::format("trace", "LSTM step without cell state"))?;
    let (rows, cols) = dh.shape();

    let mut da = [
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
        Matrix::zeros(rows, cols),
    ];
    let mut dc_prev = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for j in 0..cols {
            let (iv, fv, ov, gv) = (i.get(r, j), f.get(r, j), o.get(r, j), g.get(r, j));
            let tc = c.get(r, j).tanh();
            let dhv = dh.get(r, j);
            let dc = dc_in.get(r, j) + dhv * ov * (1.0 - tc * tc);
            da[0].set(r, j, dc * gv * iv * (1.0 - iv));
            da[1].set(r, j, dc * c_prev.get(r, j) * fv * (1.0 - fv));
            da[2].set(r, j, dhv * tc * ov * (1.0 - ov));
            da[3].set(r, j, dc * iv * (1.0 - gv * gv));
            dc_prev.set(r, j, dc * fv);
        }
    }
    let mut dh_prev = Matrix::zeros(rows, cols);
    for (k, d) in da.iter().enumerate() {
        dh_prev.add_assign(&accumulate_gate(kind, weights, k, d, &step.x, h_prev, grads)?)?;
    }
    Ok((dh_prev, dc_prev))
}
