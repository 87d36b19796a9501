use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{jacobian, spectral_radius};
use crate::cells::{CellConfig, Network, Sampling, Scope};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Stream};
use crate::quantize::{QuantizerSpec, Variant};

pub const TRACE_HEADER: &str = "step,quantizer,spectral_radius,hidden_norm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    /// 1-based step index.
    pub step: usize,
    pub spectral_radius: f64,
    pub hidden_norm: f64,
}

/// Per-step spectral radius of `∂h_t/∂h_{t-1}` and `‖h_t‖₂` for one
/// quantizer on the recurrent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsTrace {
    pub label: String,
    pub points: Vec<TracePoint>,
}

impl DiagnosticsTrace {
    pub fn mean_radius(&self) -> f64 {
        self.points.iter().map(|p| p.spectral_radius).sum::<f64>() / self.points.len().max(1) as f64
    }

    /// Fraction of steps whose radius exceeds `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        let n = self.points.iter().filter(|p| p.spectral_radius > threshold).count();
        n as f64 / self.points.len().max(1) as f64
    }

    /// `‖h_T‖ / ‖h_1‖`.
    pub fn final_growth(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.hidden_norm / a.hidden_norm,
            _ => 1.0,
        }
    }

    /// `max_t ‖h_t‖ / ‖h_1‖`.
    pub fn max_growth(&self) -> f64 {
        let first = self.points.first().map_or(1.0, |p| p.hidden_norm);
        self.points.iter().map(|p| p.hidden_norm / first).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub steps: usize,
    /// Standard deviation of the Gaussian inputs; 0 gives zero input.
    pub input_scale: f64,
    /// Every entry of the initial hidden state.
    pub h0: f64,
    pub power_iters: usize,
    /// Draw a fresh recurrent image every step; otherwise once per sequence.
    pub resample_each_step: bool,
    /// Include an unquantized run labeled `none`.
    pub include_baseline: bool,
    pub quantizers: Vec<QuantizerSpec>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            input_scale: 1.0,
            h0: 1.0,
            power_iters: 200,
            resample_each_step: true,
            include_baseline: true,
            quantizers: vec![
                QuantizerSpec::binary(Variant::Stochastic),
                QuantizerSpec::ternary(Variant::Stochastic),
                QuantizerSpec::expquant(Variant::Stochastic, -8, 0),
            ],
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("diagnostics.steps", "must be at least 1"));
        }
        if self.power_iters < 100 {
            return Err(Error::config("diagnostics.power_iters", "must be at least 100"));
        }
        if !(self.input_scale >= 0.0 && self.input_scale.is_finite()) || !self.h0.is_finite() {
            return Err(Error::config("diagnostics.input_scale", "must be finite and non-negative"));
        }
        for q in &self.quantizers {
            q.validate()?;
        }
        Ok(())
    }
}

/// Runs a freshly initialized cell for `cfg.steps` steps once per
/// quantizer, applying the quantizer to the recurrent weights only.
/// Every run shares the initialization and input sequence of `cfg.seed`.
pub fn stability_sweep(cell: &CellConfig, cfg: &SweepConfig) -> Result<Vec<DiagnosticsTrace>> {
    cfg.validate()?;
    let mut runs: Vec<Option<QuantizerSpec>> = Vec::new();
    if cfg.include_baseline {
        runs.push(None);
    }
    runs.extend(cfg.quantizers.iter().copied().map(Some));

    let mut data_rng = Rng::for_stream(cfg.seed, Stream::Data);
    let inputs: Vec<Matrix> = (0..cfg.steps)
        .map(|_| Matrix::from_fn(1, cell.input_size, |_, _| cfg.input_scale * data_rng.normal()))
        .collect();

    runs.into_iter()
        .map(|q| {
            let scope = q.map_or_else(Scope::none, Scope::recurrent);
            let mut net = Network::new(cell.clone().with_scope(scope), 1, &mut Rng::for_stream(cfg.seed, Stream::Init))?;
            let mut q_rng = Rng::for_stream(cfg.seed, Stream::Diagnostics);
            let mut p_rng = Rng::with_stream_id(cfg.seed, Stream::Diagnostics as u64 + 16);
            if !cfg.resample_each_step {
                net.refresh(Sampling::Training, &mut q_rng);
            }
            let mut h = Matrix::filled(1, cell.hidden_size, cfg.h0);
            let mut c = Matrix::zeros(1, cell.hidden_size);
            let mut points = Vec::with_capacity(cfg.steps);
            for (t, x) in inputs.iter().enumerate() {
                if cfg.resample_each_step {
                    net.refresh(Sampling::Training, &mut q_rng);
                }
                let trace = net.forward(std::slice::from_ref(x), Some(&h), Some(&c), None)?;
                let rho = spectral_radius(&jacobian(&net, &trace, 1, 0)?, cfg.power_iters, &mut p_rng)?;
                let step = trace.steps.into_iter().next().expect("one step");
                h = step.h;
                if let Some(nc) = step.c {
                    c = nc;
                }
                points.push(TracePoint {
                    step: t + 1,
                    spectral_radius: rho,
                    hidden_norm: h.frobenius_norm(),
                });
            }
            Ok(DiagnosticsTrace {
                label: q.map_or_else(|| "none".to_string(), |q| q.label()),
                points,
            })
        })
        .collect()
}

pub fn write_traces_csv<W: Write>(traces: &[DiagnosticsTrace], mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for tr in traces {
        for p in &tr.points {
            writeln!(w, "{},{},{},{}", p.step, tr.label, p.spectral_radius, p.hidden_norm)?;
        }
    }
    Ok(())
}
