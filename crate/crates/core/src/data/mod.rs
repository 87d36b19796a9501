//! Character corpora, labeled feature sequences, and minibatching.

mod corpus;
mod sequences;

pub use corpus::{load_char_corpus, CharCorpus, LmData, Split, SplitFractions};
pub use sequences::{
    synth_classification, synth_templates, Sample, SeqDataset, Standardizer, SynthConfig,
};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// What a batch is scored against.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One target per step and row (language modeling).
    Steps(Vec<Vec<usize>>),
    /// One label per row, scored on the final state.
    Final(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// One `batch × input` matrix per step.
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
    /// Per step, per row; `false` marks padding.
    pub mask: Option<Vec<Vec<bool>>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

/// A dataset that can assemble a batch from sample indices.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn batch(&self, indices: &[usize]) -> Result<Batch>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `0..n` into batches of `batch_size`, keeping the final partial
/// batch. With an rng the order is shuffled first.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches<S: BatchSource + ?Sized>(
    source: &S,
    batch_size: usize,
    rng: Option<&mut Rng>,
) -> Result<Vec<Batch>> {
    batch_indices(source.len(), batch_size, rng)?
        .iter()
        .map(|idx| source.batch(idx))
        .collect()
}

/// One-hot rows for a column of symbols.
pub(crate) fn one_hot(symbols: impl ExactSizeIterator<Item = usize>, vocab: usize) -> Matrix {
    let mut m = Matrix::zeros(symbols.len(), vocab);
    for (i, s) in symbols.enumerate() {
        m.set(i, s, 1.0);
    }
    m
}
