//! State-transition Jacobians, their spectral radius, and stability sweeps
//! of hidden-state growth under quantized recurrent weights.

mod sweep;

pub use sweep::{stability_sweep, write_traces_csv, DiagnosticsTrace, SweepConfig, TracePoint, TRACE_HEADER};

use crate::cells::{CellKind, Network, StateTrace};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// `diag(d) · m`
fn scale_rows(d: &[f64], m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| d[i] * m.get(i, j))
}

fn column(m: &Matrix, row: usize) -> Vec<f64> {
    m.row(row).to_vec()
}

/// Exact `∂h_t/∂h_{t-1}` for batch row `row`, using the forward images the
/// trace was produced with. States are numbered from the initial state
/// `h_0`, so `t` ranges over `1..=trace.len()`. For LSTM the previous cell
/// state is held fixed.
pub fn jacobian(net: &Network, trace: &StateTrace, t: usize, row: usize) -> Result<Matrix> {
    if t == 0 {
        return Err(Error::NoPredecessor(0));
    }
    if t > trace.len() {
        return Err(Error::Data(format!("step {t} beyond trace of length {}", trace.len())));
    }
    let step = &trace.steps[t - 1];
    let n = net.cell.hidden_size;
    if row >= step.h.rows() {
        return Err(Error::Data(format!("row {row} beyond batch of {}", step.h.rows())));
    }
    if !step.is_active(row) {
        return Ok(Matrix::identity(n));
    }
    let h_prev = column(trace.prev_h(t - 1), row);
    let w_h = |k: usize| &net.groups[net.cell.kind.gate_count() + k].quantized;

    let j = match net.cell.kind {
        CellKind::Vanilla => {
            let pre = step
                .pre
                .as_ref()
                .ok_or_else(|| Error::format("trace", "vanilla step without pre-activation"))?;
            let act = net.cell.activation;
            let d: Vec<f64> = (0..n).map(|i| act.derivative(pre.get(row, i), step.h.get(row, i))).collect();
            scale_rows(&d, w_h(0))
        }
        CellKind::Gru => {
            let (z, r, c) = (column(&step.gates[0], row), column(&step.gates[1], row), column(&step.gates[2], row));
            let dz = scale_rows(&z.iter().map(|z| z * (1.0 - z)).collect::<Vec<_>>(), w_h(0));
            let dr = scale_rows(&r.iter().map(|r| r * (1.0 - r)).collect::<Vec<_>>(), w_h(1));
            // ∂(s_prev ⊙ r)/∂s_prev = diag(r) + diag(s_prev) · ∂r/∂s_prev
            let mut reset = scale_rows(&h_prev, &dr);
            for i in 0..n {
                reset.set(i, i, reset.get(i, i) + r[i]);
            }
            let dc = scale_rows(&c.iter().map(|c| 1.0 - c * c).collect::<Vec<_>>(), &w_h(2).matmul(&reset)?);
            Matrix::from_fn(n, n, |i, k| {
                let carry = if i == k { z[i] } else { 0.0 };
                carry + (h_prev[i] - c[i]) * dz.get(i, k) + (1.0 - z[i]) * dc.get(i, k)
            })
        }
        CellKind::Lstm => {
            let gate = |k: usize| column(&step.gates[k], row);
            let (i, f, o, g) = (gate(0), gate(1), gate(2), gate(3));
            let c_prev = column(
                trace.prev_c(t - 1).ok_or_else(|| Error::format("trace", "LSTM trace without cell state"))?,
                row,
            );
            let c = column(step.c.as_ref().ok_or_else(|| Error::format("trace", "LSTM step without cell state"))?, row);
            let sig = |v: &[f64]| v.iter().map(|x| x * (1.0 - x)).collect::<Vec<_>>();
            let di = scale_rows(&sig(&i), w_h(0));
            let df = scale_rows(&sig(&f), w_h(1));
            let d_o = scale_rows(&sig(&o), w_h(2));
            let dg = scale_rows(&g.iter().map(|g| 1.0 - g * g).collect::<Vec<_>>(), w_h(3));
            Matrix::from_fn(n, n, |a, b| {
                let tc = c[a].tanh();
                let dc = c_prev[a] * df.get(a, b) + g[a] * di.get(a, b) + i[a] * dg.get(a, b);
                tc * d_o.get(a, b) + o[a] * (1.0 - tc * tc) * dc
            })
        }
    };
    Ok(j)
}

/// Largest singular value of `j` by power iteration on `JᵀJ`, used as the
/// maximum-eigenvalue proxy. The estimate is the norm `‖J v‖` at the final
/// unit iterate, which never exceeds the true value.
pub fn spectral_radius(j: &Matrix, iters: usize, rng: &mut Rng) -> Result<f64> {
    let (r, c) = j.shape();
    if r != c {
        return Err(Error::NotSquare(r, c));
    }
    if r == 0 {
        return Ok(0.0);
    }
    let norm = |v: &Matrix| v.frobenius_norm();
    let mut v = Matrix::from_fn(r, 1, |_, _| rng.normal());
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let nv = norm(&v);
        if nv == 0.0 || !nv.is_finite() {
            return Ok(if nv == 0.0 { 0.0 } else { f64::INFINITY });
        }
        v = v.scale(1.0 / nv);
        let jv = j.matmul(&v)?;
        sigma = norm(&jv);
        v = j.matmul_at(&jv)?;
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellConfig, Scope};

    #[test]
    fn diagonal_matrix() {
        let mut rng = Rng::new(1);
        let rho = spectral_radius(&Matrix::diag(&[2.0, 0.5]), 200, &mut rng).unwrap();
        assert!((rho - 2.0).abs() < 1e-9);
        let rho = spectral_radius(&Matrix::identity(5), 100, &mut rng).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        let rho = spectral_radius(&Matrix::diag(&[0.3, -4.0, 1.0]), 200, &mut rng).unwrap();
        assert!((rho - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_and_non_square() {
        let mut rng = Rng::new(1);
        assert_eq!(spectral_radius(&Matrix::zeros(3, 3), 100, &mut rng).unwrap(), 0.0);
        assert!(matches!(
            spectral_radius(&Matrix::zeros(2, 3), 100, &mut rng),
            Err(Error::NotSquare(2, 3))
        ));
    }

    fn vanilla(n: usize) -> Network {
        Network::new(CellConfig::new(CellKind::Vanilla, 2, n), 2, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn relu_all_active_identity_gives_identity() {
        let net = vanilla(4);
        let trace = net
            .forward(&[Matrix::zeros(1, 2)], Some(&Matrix::filled(1, 4, 1.0)), None, None)
            .unwrap();
        assert_eq!(jacobian(&net, &trace, 1, 0).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn relu_all_inactive_gives_zero() {
        let net = vanilla(4);
        let trace = net
            .forward(&[Matrix::zeros(1, 2)], Some(&Matrix::filled(1, 4, -1.0)), None, None)
            .unwrap();
        assert_eq!(jacobian(&net, &trace, 1, 0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn saturated_update_gate_gives_identity() {
        let mut net = Network::new(CellConfig::new(CellKind::Gru, 2, 3), 2, &mut Rng::new(3)).unwrap();
        let bz = net.group_mut("b_z").unwrap();
        bz.master = Matrix::filled(1, 3, 60.0);
        bz.quantized = bz.master.clone();
        let trace = net
            .forward(&[Matrix::filled(1, 2, 0.3)], Some(&Matrix::filled(1, 3, 0.2)), None, None)
            .unwrap();
        let j = jacobian(&net, &trace, 1, 0).unwrap();
        assert!(j.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn step_zero_has_no_predecessor() {
        let net = vanilla(2);
        let trace = net.forward(&[Matrix::zeros(1, 2)], None, None, None).unwrap();
        assert!(matches!(jacobian(&net, &trace, 0, 0), Err(Error::NoPredecessor(0))));
        assert!(jacobian(&net, &trace, 2, 0).is_err());
    }

    #[test]
    fn quantized_image_is_used() {
        let q = crate::quantize::QuantizerSpec::binary(crate::quantize::Variant::Deterministic);
        let mut net = Network::new(
            CellConfig::new(CellKind::Vanilla, 2, 3).with_scope(Scope::recurrent(q)),
            2,
            &mut Rng::new(3),
        )
        .unwrap();
        net.refresh(crate::cells::Sampling::Deterministic, &mut Rng::new(0));
        let trace = net
            .forward(&[Matrix::zeros(1, 2)], Some(&Matrix::filled(1, 3, 1.0)), None, None)
            .unwrap();
        // Identity binarizes to all ones; every unit stays active.
        assert_eq!(jacobian(&net, &trace, 1, 0).unwrap(), Matrix::filled(3, 3, 1.0));
    }
}
