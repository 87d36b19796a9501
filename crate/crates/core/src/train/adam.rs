use crate::cells::WeightGroup;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{Precision, TrainConfig};

/// First and second moments per weight group, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(groups: &[WeightGroup]) -> Self {
        let zeros = || {
            groups
                .iter()
                .map(|g| Matrix::zeros(g.master.rows(), g.master.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every master. The forward images are
/// left alone until the next refresh. Masters of binary and ternary groups
/// are clipped to `±cfg.master_clip` afterwards.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves the weights and moments untouched.
pub fn adam_step(
    state: &mut AdamState,
    groups: &mut [WeightGroup],
    grads: &[Matrix],
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != groups.len() || state.m.len() != groups.len() {
        return Err(Error::format("optimizer state", "group count mismatch"));
    }
    for ((g, grad), m) in groups.iter().zip(grads).zip(&state.m) {
        if grad.shape() != g.master.shape() || m.shape() != g.master.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: g.master.shape(),
                rhs: grad.shape(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, g) in groups.iter_mut().enumerate() {
        let clip = g.quantizer.is_some_and(|q| q.clips_master()).then_some(cfg.master_clip);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, &gr), m), v) in g.master.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if let Some(c) = clip {
                *w = w.clamp(-c, c);
            }
            if cfg.precision == Precision::F32 {
                *w = *w as f32 as f64;
            }
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
