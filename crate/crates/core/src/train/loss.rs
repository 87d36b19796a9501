use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, Matrix};

/// Bits per character from a mean cross-entropy in nats.
pub fn bpc(nats: f64) -> f64 {
    nats / LN_2
}

/// Summed loss statistics over the scored positions of one or more batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub nats: f64,
    pub count: usize,
    pub correct: usize,
}

impl LossStats {
    pub fn merge(&mut self, other: LossStats) {
        self.nats += other.nats;
        self.count += other.count;
        self.correct += other.correct;
    }

    /// Mean negative log-likelihood in nats (0 when nothing was scored).
    pub fn cross_entropy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.nats / self.count as f64
        }
    }

    pub fn bpc(&self) -> f64 {
        bpc(self.cross_entropy())
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

fn is_scored(mask: Option<&[Vec<bool>]>, t: usize, row: usize) -> bool {
    mask.is_none_or(|m| m[t][row])
}

fn check_targets(rows: &[Matrix], targets: &[Vec<usize>], mask: Option<&[Vec<bool>]>) -> Result<()> {
    if rows.len() != targets.len() || mask.is_some_and(|m| m.len() != rows.len()) {
        return Err(Error::Data(format!(
            "{} steps of predictions for {} steps of targets",
            rows.len(),
            targets.len()
        )));
    }
    for (t, (p, tg)) in rows.iter().zip(targets).enumerate() {
        if tg.len() != p.rows() || mask.is_some_and(|m| m[t].len() != p.rows()) {
            return Err(Error::Data(format!("step {t}: batch size mismatch")));
        }
        if let Some(&bad) = tg.iter().find(|&&k| k >= p.cols()) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                vocab: p.cols(),
            });
        }
    }
    Ok(())
}

fn count_scored(rows: &[Matrix], mask: Option<&[Vec<bool>]>) -> usize {
    match mask {
        None => rows.iter().map(Matrix::rows).sum(),
        Some(m) => m.iter().map(|r| r.iter().filter(|&&v| v).count()).sum(),
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Mean cross-entropy of probability rows against targets, and its
/// gradient with respect to the logits: `(p − onehot) / count` at scored
/// positions, zero elsewhere.
pub fn cross_entropy(
    p_seq: &[Matrix],
    targets: &[Vec<usize>],
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, Vec<Matrix>)> {
    check_targets(p_seq, targets, mask)?;
    let count = count_scored(p_seq, mask);
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let mut nats = 0.0;
    let grads = p_seq
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut g = Matrix::zeros(p.rows(), p.cols());
            for row in (0..p.rows()).filter(|&r| is_scored(mask, t, r)) {
                let k = targets[t][row];
                nats -= p.get(row, k).ln();
                for (j, gv) in g.row_mut(row).iter_mut().enumerate() {
                    *gv = (p.get(row, j) - f64::from(j == k)) * scale;
                }
            }
            g
        })
        .collect();
    Ok((nats * scale, grads))
}

/// Cross-entropy computed from logits through a stable log-softmax.
/// Returns summed statistics and the gradient of the mean loss.
pub fn cross_entropy_logits(
    logits: &[Matrix],
    targets: &[Vec<usize>],
    mask: Option<&[Vec<bool>]>,
) -> Result<(LossStats, Vec<Matrix>)> {
    check_targets(logits, targets, mask)?;
    let count = count_scored(logits, mask);
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let mut stats = LossStats {
        count,
        ..LossStats::default()
    };
    let grads = logits
        .iter()
        .enumerate()
        .map(|(t, z)| {
            let logp = log_softmax_rows(z);
            let mut g = Matrix::zeros(z.rows(), z.cols());
            for row in (0..z.rows()).filter(|&r| is_scored(mask, t, r)) {
                let k = targets[t][row];
                stats.nats -= logp.get(row, k);
                if argmax(z.row(row)) == k {
                    stats.correct += 1;
                }
                for (j, gv) in g.row_mut(row).iter_mut().enumerate() {
                    *gv = (logp.get(row, j).exp() - f64::from(j == k)) * scale;
                }
            }
            g
        })
        .collect();
    Ok((stats, grads))
}
