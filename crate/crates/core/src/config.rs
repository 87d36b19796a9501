//! The run configuration document (TOML) and the data and network it
//! describes.
//!
//! ```toml
//! task = "char_lm"
//! seed = 1
//!
//! [model]
//! kind = "vanilla"
//! hidden_size = 64
//!
//! [quantize.recurrent]
//! method = "binary"
//! variant = "stochastic"
//!
//! [train]
//! lr = 2e-3
//! max_epochs = 10
//! patience = 5
//!
//! [data]
//! corpus = "corpus.txt"
//! seq_len = 50
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::{CellConfig, CellKind, Network, Role, Scope};
use crate::data::{
    load_char_corpus, synth_classification, BatchSource, CharCorpus, LmData, SeqDataset, Split,
    SplitFractions, Standardizer, SynthConfig,
};
use crate::diagnostics::SweepConfig;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Rng, Stream};
use crate::train::{Task, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: CellKind,
    pub hidden_size: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Plain-text corpus (`char_lm`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Use only the first `max_chars` characters of the corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_chars: Option<usize>,
    pub seq_len: usize,
    pub split: SplitFractions,
    /// `QSEQ` file (`seq_classify`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Synthetic classification data (`seq_classify`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// Share of a classification dataset held out for validation.
    pub valid_fraction: f64,
    pub masking: bool,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            max_chars: None,
            seq_len: 50,
            split: SplitFractions::default(),
            dataset: None,
            synth: None,
            valid_fraction: 0.2,
            masking: true,
            standardize: true,
        }
    }
}

/// Input width for the diagnostics cell, which needs no data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub input_size: usize,
    pub sweep: SweepConfig,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            input_size: 8,
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    /// Quantizer per weight role.
    #[serde(default)]
    pub quantize: Scope,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub diagnostics: DiagnoseConfig,
}

impl RunConfig {
    /// Parses and validates a document. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "document".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.corpus, &mut self.data.dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("run config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden_size == 0 {
            return Err(Error::config("model.hidden_size", "must be positive"));
        }
        for (role, name) in [
            (Role::Input, "input"),
            (Role::Recurrent, "recurrent"),
            (Role::Bias, "bias"),
            (Role::Output, "output"),
        ] {
            if let Some(q) = self.quantize.get(role) {
                q.validate()
                    .map_err(|e| Error::config(format!("quantize.{name}"), e.to_string()))?;
            }
        }
        self.train.validate()?;
        let d = &self.data;
        match self.task {
            Task::CharLm => {
                if d.corpus.is_none() {
                    return Err(Error::config("data.corpus", "required for task char_lm"));
                }
                d.split.validate()?;
                if d.seq_len < 2 {
                    return Err(Error::config("data.seq_len", "must be at least 2"));
                }
            }
            Task::SeqClassify => {
                match (&d.dataset, &d.synth) {
                    (None, None) => {
                        return Err(Error::config("data.dataset", "seq_classify needs data.dataset or data.synth"))
                    }
                    (Some(_), Some(_)) => {
                        return Err(Error::config("data.synth", "give either data.dataset or data.synth, not both"))
                    }
                    (None, Some(s)) => s.validate()?,
                    _ => {}
                }
                if !(d.valid_fraction > 0.0 && d.valid_fraction < 1.0) {
                    return Err(Error::config("data.valid_fraction", "must lie in (0, 1)"));
                }
            }
        }
        if self.diagnostics.input_size == 0 {
            return Err(Error::config("diagnostics.input_size", "must be positive"));
        }
        self.diagnostics.sweep.validate()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cell(&self, input_size: usize) -> CellConfig {
        CellConfig {
            kind: self.model.kind,
            input_size,
            hidden_size: self.model.hidden_size,
            activation: self.model.activation,
            scope: self.quantize,
        }
    }

    /// A freshly initialized network sized for `data`.
    pub fn build_network(&self, data: &TaskData) -> Result<Network> {
        let mut rng = Rng::for_stream(self.seed, Stream::Init);
        Network::new(self.cell(data.input_size()), data.output_size(), &mut rng)
    }

    pub fn load_data(&self) -> Result<TaskData> {
        let d = &self.data;
        match self.task {
            Task::CharLm => {
                let path = d.corpus.as_ref().ok_or_else(|| Error::config("data.corpus", "missing"))?;
                let corpus = match d.max_chars {
                    None => load_char_corpus(path, d.split, d.seq_len)?,
                    Some(n) => {
                        let text: String = std::fs::read_to_string(path)?.chars().take(n).collect();
                        CharCorpus::from_text(&text, d.split, d.seq_len)?
                    }
                };
                Ok(TaskData::CharLm {
                    train: corpus.lm_data(Split::Train),
                    valid: corpus.lm_data(Split::Valid),
                    test: corpus.lm_data(Split::Test),
                    corpus,
                })
            }
            Task::SeqClassify => {
                let mut all = match (&d.dataset, &d.synth) {
                    (Some(path), _) => SeqDataset::load(path)?,
                    (None, Some(s)) => synth_classification(s)?,
                    (None, None) => return Err(Error::config("data.dataset", "missing")),
                };
                all.masking = d.masking;
                let (mut train, mut valid) = all.split(1.0 - d.valid_fraction);
                if train.is_empty() || valid.is_empty() {
                    return Err(Error::Data("classification split left a side empty".into()));
                }
                if d.standardize {
                    let st = Standardizer::fit(&train);
                    st.apply(&mut train);
                    st.apply(&mut valid);
                }
                Ok(TaskData::SeqClassify { train, valid })
            }
        }
    }
}

pub enum TaskData {
    CharLm {
        corpus: CharCorpus,
        train: LmData,
        valid: LmData,
        test: LmData,
    },
    SeqClassify {
        train: SeqDataset,
        valid: SeqDataset,
    },
}

impl TaskData {
    pub fn input_size(&self) -> usize {
        match self {
            TaskData::CharLm { corpus, .. } => corpus.vocab_size(),
            TaskData::SeqClassify { train, .. } => train.dim,
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            TaskData::CharLm { corpus, .. } => corpus.vocab_size(),
            TaskData::SeqClassify { train, .. } => train.classes,
        }
    }

    pub fn train(&self) -> &dyn BatchSource {
        match self {
            TaskData::CharLm { train, .. } => train,
            TaskData::SeqClassify { train, .. } => train,
        }
    }

    pub fn valid(&self) -> &dyn BatchSource {
        match self {
            TaskData::CharLm { valid, .. } => valid,
            TaskData::SeqClassify { valid, .. } => valid,
        }
    }

    /// The held-out test split; classification data has none and falls
    /// back to validation.
    pub fn test(&self) -> &dyn BatchSource {
        match self {
            TaskData::CharLm { test, .. } => test,
            TaskData::SeqClassify { valid, .. } => valid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LM: &str = r#"
task = "char_lm"
seed = 3

[model]
kind = "vanilla"
hidden_size = 16

[quantize.recurrent]
method = "ternary"
variant = "stochastic"

[train]
lr = 0.002
max_epochs = 4
patience = 2

[data]
corpus = "corpus.txt"
seq_len = 20
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml_str(LM).unwrap();
        assert_eq!(cfg.model.activation, Activation::Relu);
        assert!(cfg.quantize.recurrent.is_some() && cfg.quantize.input.is_none());
        assert_eq!(cfg.train_config().seed, 3);
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = LM.replace("seq_len = 20", "seq_len = 20\nsequence_length = 3");
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("sequence_length"), "{err}");
    }

    #[test]
    fn stochastic_pow2ternary_is_rejected_naming_the_role() {
        let text = LM.replace(r#"method = "ternary""#, r#"method = "pow2ternary""#);
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("quantize.recurrent") && err.contains("deterministic only"), "{err}");
    }

    #[test]
    fn task_requirements() {
        let text = LM.replace(r#"corpus = "corpus.txt""#, "");
        assert!(RunConfig::from_toml_str(&text).unwrap_err().to_string().contains("data.corpus"));
        let text = LM.replace(r#"task = "char_lm""#, r#"task = "seq_classify""#);
        assert!(RunConfig::from_toml_str(&text).unwrap_err().to_string().contains("data.dataset"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::from_toml_str(LM).unwrap();
        cfg.resolve_paths(Path::new("/tmp/run"));
        assert_eq!(cfg.data.corpus.unwrap(), Path::new("/tmp/run/corpus.txt"));
    }

    #[test]
    fn synthetic_classification_data() {
        let text = r#"
task = "seq_classify"
[model]
kind = "gru"
hidden_size = 8
[data.synth]
classes = 3
per_class = 10
frames = 8
dim = 2
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let data = cfg.load_data().unwrap();
        assert_eq!((data.input_size(), data.output_size()), (2, 3));
        assert_eq!(data.train().len() + data.valid().len(), 30);
        let net = cfg.build_network(&data).unwrap();
        assert_eq!(net.cell.kind, CellKind::Gru);
    }
}
