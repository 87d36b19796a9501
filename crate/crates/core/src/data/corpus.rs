use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{one_hot, Batch, BatchSource, Targets};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.9,
            valid: 0.05,
            test: 0.05,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("valid", self.valid), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("data.split.{name}"), "must lie in [0, 1]"));
            }
        }
        if (self.train + self.valid + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", "fractions must sum to 1"));
        }
        if self.train == 0.0 {
            return Err(Error::config("data.split.train", "must be positive"));
        }
        Ok(())
    }
}

/// An encoded text stream split by position into train, valid and test.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    index: BTreeMap<char, usize>,
    stream: Vec<usize>,
    bounds: [Range<usize>; 3],
    seq_len: usize,
}

impl CharCorpus {
    /// The alphabet is the sorted set of observed characters.
    pub fn from_text(text: &str, fractions: SplitFractions, seq_len: usize) -> Result<Self> {
        fractions.validate()?;
        if text.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if seq_len < 2 {
            return Err(Error::config("data.seq_len", "must be at least 2"));
        }
        let alphabet: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<char, usize> = alphabet.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let stream: Vec<usize> = text.chars().map(|c| index[&c]).collect();

        let n = stream.len();
        let train_end = (n as f64 * fractions.train).floor() as usize;
        let valid_end = (train_end + (n as f64 * fractions.valid).floor() as usize).min(n);
        let bounds = [0..train_end, train_end..valid_end, valid_end..n];
        for (b, frac, name) in [
            (&bounds[0], fractions.train, "train"),
            (&bounds[1], fractions.valid, "valid"),
            (&bounds[2], fractions.test, "test"),
        ] {
            if frac > 0.0 && b.len() < seq_len {
                return Err(Error::Data(format!(
                    "sequence length {seq_len} exceeds the {name} split ({} symbols)",
                    b.len()
                )));
            }
        }
        Ok(Self {
            alphabet,
            index,
            stream,
            bounds,
            seq_len,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn stream(&self) -> &[usize] {
        &self.stream
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("symbol {c:?} is not in the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, symbols: &[usize]) -> String {
        symbols.iter().map(|&s| self.alphabet[s]).collect()
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.bounds[split as usize].clone()
    }

    /// Contiguous length-`L` chunks of a split; the trailing remainder is dropped.
    pub fn sequences(&self, split: Split) -> Vec<&[usize]> {
        self.stream[self.range(split)].chunks_exact(self.seq_len).collect()
    }

    pub fn lm_data(&self, split: Split) -> LmData {
        LmData {
            vocab: self.vocab_size(),
            sequences: self.sequences(split).into_iter().map(<[usize]>::to_vec).collect(),
        }
    }
}

pub fn load_char_corpus(path: &Path, fractions: SplitFractions, seq_len: usize) -> Result<CharCorpus> {
    let text = std::fs::read_to_string(path)?;
    CharCorpus::from_text(&text, fractions, seq_len)
}

/// Language-modeling view: each sequence predicts its own next symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct LmData {
    pub vocab: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl BatchSource for LmData {
    fn len(&self) -> usize {
        self.sequences.len()
    }

    /// Inputs are `seq[..L-1]` one-hot, targets `seq[1..]`.
    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let seqs: Vec<&[usize]> = indices
            .iter()
            .map(|&i| {
                self.sequences
                    .get(i)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::Data(format!("sequence index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let steps = seqs.first().map_or(0, |s| s.len().saturating_sub(1));
        if seqs.iter().any(|s| s.len() != steps + 1) {
            return Err(Error::Data("sequences in a batch differ in length".into()));
        }
        let inputs = (0..steps)
            .map(|t| one_hot(seqs.iter().map(|s| s[t]), self.vocab))
            .collect();
        let targets = (0..steps).map(|t| seqs.iter().map(|s| s[t + 1]).collect()).collect();
        Ok(Batch {
            inputs,
            targets: Targets::Steps(targets),
            mask: None,
        })
    }
}
