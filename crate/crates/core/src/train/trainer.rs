use crate::cells::{Network, Sampling};
use crate::data::{batch_indices, Batch, BatchSource, Targets};
use crate::error::Result;
use crate::numerics::{Matrix, Rng, Stream};

use super::{
    adam_step, clip_global_norm, cross_entropy_logits, AdamState, Decision, EarlyStopper, EvalMode,
    LossStats, Metric, MetricsLog, Precision, Task, TrainConfig,
};

/// Loss statistics of one batch under the network's current forward
/// images, and the mean-loss gradient for every group (readout included),
/// taken with respect to those images.
pub fn loss_and_grads(net: &Network, batch: &Batch) -> Result<(LossStats, Vec<Matrix>)> {
    let trace = net.forward(&batch.inputs, None, None, batch.mask.as_deref())?;
    let mut grads = net.zero_grads();
    let n_cell = net.cell.group_count();
    let (cell_grads, readout) = grads.split_at_mut(n_cell);
    let (gw, gb) = readout.split_at_mut(1);
    let steps = trace.len();
    let (batch_rows, hidden) = (batch.size(), net.cell.hidden_size);

    let (stats, grad_out) = match &batch.targets {
        Targets::Steps(targets) => {
            let logits = trace
                .hidden_states()
                .map(|h| net.logits(h))
                .collect::<Result<Vec<_>>>()?;
            let (stats, dlogits) = cross_entropy_logits(&logits, targets, batch.mask.as_deref())?;
            let grad_out = trace
                .hidden_states()
                .zip(&dlogits)
                .map(|(h, dz)| net.readout_backward(h, dz, &mut gw[0], &mut gb[0]))
                .collect::<Result<Vec<_>>>()?;
            (stats, grad_out)
        }
        Targets::Final(labels) => {
            let h = trace.last_h();
            let logits = net.logits(h)?;
            let (stats, dlogits) = cross_entropy_logits(&[logits], std::slice::from_ref(labels), None)?;
            let mut grad_out = vec![Matrix::zeros(batch_rows, hidden); steps];
            if let Some(last) = grad_out.last_mut() {
                *last = net.readout_backward(h, &dlogits[0], &mut gw[0], &mut gb[0])?;
            }
            (stats, grad_out)
        }
    };
    let back = net.backward(&trace, &grad_out)?;
    for (dst, src) in cell_grads.iter_mut().zip(back.weights) {
        *dst = src;
    }
    Ok((stats, grads))
}

/// A copy of `net` whose forward images follow `mode` (no sampling).
pub fn evaluation_network(net: &Network, mode: EvalMode) -> Network {
    let mut eval = net.clone();
    let sampling = match mode {
        EvalMode::FullPrecision => Sampling::FullPrecision,
        EvalMode::DeterministicQuantized => Sampling::Deterministic,
    };
    // Neither mode draws from the rng.
    eval.refresh(sampling, &mut Rng::new(0));
    eval
}

/// Deterministic evaluation over `data` in its stored order.
pub fn evaluate(net: &Network, data: &dyn BatchSource, mode: EvalMode, batch_size: usize) -> Result<LossStats> {
    let eval = evaluation_network(net, mode);
    let mut total = LossStats::default();
    for idx in batch_indices(data.len(), batch_size, None)? {
        let batch = data.batch(&idx)?;
        total.merge(batch_stats(&eval, &batch)?);
    }
    Ok(total)
}

fn batch_stats(net: &Network, batch: &Batch) -> Result<LossStats> {
    let trace = net.forward(&batch.inputs, None, None, batch.mask.as_deref())?;
    Ok(match &batch.targets {
        Targets::Steps(targets) => {
            let logits = trace
                .hidden_states()
                .map(|h| net.logits(h))
                .collect::<Result<Vec<_>>>()?;
            cross_entropy_logits(&logits, targets, batch.mask.as_deref())?.0
        }
        Targets::Final(labels) => {
            cross_entropy_logits(&[net.logits(trace.last_h())?], std::slice::from_ref(labels), None)?.0
        }
    })
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub quant_rng: Rng,
    pub shuffle_rng: Rng,
}

impl TrainState {
    pub fn new(net: &Network, cfg: &TrainConfig, task: Task) -> Self {
        Self {
            adam: AdamState::new(&net.groups),
            epoch: 0,
            stopper: EarlyStopper::new(cfg.patience, task.monitored().higher_is_better()),
            quant_rng: Rng::for_stream(cfg.seed, Stream::Quantize),
            shuffle_rng: Rng::for_stream(cfg.seed, Stream::Shuffle),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_value: Option<f64>,
    /// The network as it was after the best epoch.
    pub best: Network,
    pub history: Vec<Metric>,
}

impl FitReport {
    /// Last logged value of `metric` on `split`.
    pub fn last(&self, split: &str, metric: super::MetricKind) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|m| m.split == split && m.kind == metric)
            .map(|m| m.value)
    }
}

/// Straight-through training: before every batch the forward images are
/// resampled from the masters, gradients are taken at the images, and Adam
/// updates the masters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    pub task: Task,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(mut net: Network, cfg: TrainConfig, task: Task) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision == Precision::F32 {
            for g in &mut net.groups {
                g.master = g.master.map(|w| w as f32 as f64);
                g.quantized = g.master.clone();
            }
        }
        let state = TrainState::new(&net, &cfg, task);
        Ok(Self { net, cfg, task, state })
    }

    pub fn resume(net: Network, cfg: TrainConfig, task: Task, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net, cfg, task, state })
    }

    /// One pass over `data`; returns the training metrics of the epoch.
    pub fn train_epoch(&mut self, data: &dyn BatchSource) -> Result<Vec<Metric>> {
        let shuffle = self.cfg.shuffle.then_some(&mut self.state.shuffle_rng);
        let order = batch_indices(data.len(), self.cfg.batch_size, shuffle)?;
        let mut total = LossStats::default();
        for idx in order {
            let batch = data.batch(&idx)?;
            self.net.refresh(Sampling::Training, &mut self.state.quant_rng);
            let (stats, mut grads) = loss_and_grads(&self.net, &batch)?;
            if let Some(c) = self.cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut self.state.adam, &mut self.net.groups, &grads, &self.cfg)?;
            total.merge(stats);
        }
        self.state.epoch += 1;
        Ok(Metric::from_stats(self.task, &total, "train", self.state.epoch))
    }

    pub fn evaluate(&self, data: &dyn BatchSource, mode: EvalMode) -> Result<LossStats> {
        evaluate(&self.net, data, mode, self.cfg.batch_size)
    }

    pub fn fit(&mut self, train: &dyn BatchSource, valid: &dyn BatchSource, log: &mut MetricsLog) -> Result<FitReport> {
        self.fit_with(train, valid, log, |_, _| {})
    }

    /// Trains until `max_epochs` or early stop. Every epoch logs the
    /// training metrics and validation metrics in both evaluation modes
    /// (`valid_full`, `valid_quant`); the mode in `cfg.eval_mode` is the one
    /// monitored. `on_epoch` sees each epoch's metrics.
    pub fn fit_with(
        &mut self,
        train: &dyn BatchSource,
        valid: &dyn BatchSource,
        log: &mut MetricsLog,
        mut on_epoch: impl FnMut(usize, &[Metric]),
    ) -> Result<FitReport> {
        let monitored = self.task.monitored();
        let mut history = Vec::new();
        let mut best = self.net.clone();
        let mut stopped_early = false;
        while self.state.epoch < self.cfg.max_epochs {
            let mut metrics = self.train_epoch(train)?;
            let epoch = self.state.epoch;
            let full = self.evaluate(valid, EvalMode::FullPrecision)?;
            let quant = self.evaluate(valid, EvalMode::DeterministicQuantized)?;
            metrics.extend(Metric::from_stats(self.task, &full, "valid_full", epoch));
            metrics.extend(Metric::from_stats(self.task, &quant, "valid_quant", epoch));
            for m in &metrics {
                log.record(m)?;
            }
            on_epoch(epoch, &metrics);

            let watched = match self.cfg.eval_mode {
                EvalMode::FullPrecision => &full,
                EvalMode::DeterministicQuantized => &quant,
            };
            let value = match monitored {
                super::MetricKind::Accuracy => watched.accuracy(),
                super::MetricKind::Bpc => watched.bpc(),
                super::MetricKind::CrossEntropy => watched.cross_entropy(),
            };
            history.extend(metrics);
            let (decision, improved) = self.state.stopper.observe(epoch, value);
            if improved {
                best = self.net.clone();
            }
            if decision == Decision::Stop {
                stopped_early = true;
                break;
            }
        }
        log.flush()?;
        Ok(FitReport {
            epochs: self.state.epoch,
            stopped_early,
            best_epoch: self.state.stopper.best_epoch,
            best_value: self.state.stopper.best,
            best,
            history,
        })
    }
}
