//! Loss, Adam, the straight-through training loop, early stopping,
//! metrics logging and checkpoints.

mod adam;
mod checkpoint;
mod early_stop;
mod loss;
mod metrics;
mod trainer;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use early_stop::{early_stop, Decision, EarlyStopper};
pub use loss::{bpc, cross_entropy, cross_entropy_logits, LossStats};
pub use metrics::{MetricsLog, METRICS_HEADER};
pub use trainer::{evaluate, evaluation_network, loss_and_grads, FitReport, TrainState, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CharLm,
    SeqClassify,
}

impl Task {
    /// The validation metric watched for early stopping.
    pub fn monitored(self) -> MetricKind {
        match self {
            Task::CharLm => MetricKind::Bpc,
            Task::SeqClassify => MetricKind::Accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Masters used directly.
    FullPrecision,
    /// Each group's deterministic quantizer variant.
    #[default]
    DeterministicQuantized,
}

/// Storage width of the master weights. Arithmetic is always 64-bit; with
/// `f32` the masters are rounded to single precision after every update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Bpc,
    Accuracy,
    CrossEntropy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Bpc => "bpc",
            MetricKind::Accuracy => "accuracy",
            MetricKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
    pub split: String,
    pub epoch: usize,
}

impl Metric {
    /// The metrics a task reports for a set of loss statistics.
    pub fn from_stats(task: Task, stats: &LossStats, split: &str, epoch: usize) -> Vec<Metric> {
        let m = |kind, value| Metric {
            kind,
            value,
            split: split.to_string(),
            epoch,
        };
        let ce = m(MetricKind::CrossEntropy, stats.cross_entropy());
        match task {
            Task::CharLm => vec![ce, m(MetricKind::Bpc, stats.bpc())],
            Task::SeqClassify => vec![ce, m(MetricKind::Accuracy, stats.accuracy())],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Binary and ternary masters are clipped to `±master_clip`.
    pub master_clip: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub eval_mode: EvalMode,
    pub precision: Precision,
    pub shuffle: bool,
    /// Record elapsed seconds in metrics; off keeps the log reproducible.
    pub log_wallclock: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 20,
            master_clip: 1.0,
            clip_norm: None,
            eval_mode: EvalMode::default(),
            precision: Precision::default(),
            shuffle: true,
            log_wallclock: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("train.{field}"), "must be positive and finite"))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        positive("master_clip", self.master_clip)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{field}"), "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("train.patience", "must not exceed max_epochs"));
        }
        Ok(())
    }
}
