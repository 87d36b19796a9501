use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use super::{Batch, BatchSource, Targets};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Stream};

const MAGIC: &[u8; 4] = b"QSEQ";

/// One labeled sequence, `frames × dim`, with leading padding masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Matrix,
    pub label: usize,
    pub mask: Vec<bool>,
}

impl Sample {
    /// A sample whose padding is its leading all-zero frames.
    pub fn from_padded(features: Matrix, label: usize) -> Self {
        let lead = (0..features.rows())
            .take_while(|&t| features.row(t).iter().all(|&v| v == 0.0))
            .count();
        let mask = (0..features.rows()).map(|t| t >= lead).collect();
        Self { features, label, mask }
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqDataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
    /// When off, padded frames are fed to the cell like real ones.
    pub masking: bool,
}

impl SeqDataset {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            samples: Vec::new(),
            masking: true,
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.features.cols() != self.dim {
            return Err(Error::Data(format!(
                "sample has {} features, dataset has {}",
                sample.features.cols(),
                self.dim
            )));
        }
        if sample.mask.len() != sample.frames() {
            return Err(Error::Data("mask length differs from frame count".into()));
        }
        if sample.label >= self.classes {
            return Err(Error::TargetOutOfRange {
                target: sample.label,
                vocab: self.classes,
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// First `fraction` of the samples, and the rest.
    pub fn split(&self, fraction: f64) -> (SeqDataset, SeqDataset) {
        let cut = ((self.samples.len() as f64 * fraction).round() as usize).min(self.samples.len());
        let part = |s: &[Sample]| SeqDataset {
            samples: s.to_vec(),
            ..SeqDataset::new(self.dim, self.classes)
        };
        let (mut a, mut b) = (part(&self.samples[..cut]), part(&self.samples[cut..]));
        a.masking = self.masking;
        b.masking = self.masking;
        (a, b)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(self.samples.len() as u32)?;
        w.write_u32::<LE>(self.dim as u32)?;
        for s in &self.samples {
            w.write_u32::<LE>(s.frames() as u32)?;
            w.write_u32::<LE>(s.label as u32)?;
            for &v in s.features.data() {
                w.write_f32::<LE>(v as f32)?;
            }
        }
        Ok(())
    }

    /// Masks are rebuilt from leading all-zero frames; the class count is
    /// one past the largest label.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("sequence dataset", "bad magic"));
        }
        let count = r.read_u32::<LE>()? as usize;
        let dim = r.read_u32::<LE>()? as usize;
        if dim == 0 {
            return Err(Error::format("sequence dataset", "zero feature dimension"));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let frames = r.read_u32::<LE>()? as usize;
            let label = r.read_u32::<LE>()? as usize;
            let mut data = vec![0.0; frames * dim];
            for v in &mut data {
                *v = r.read_f32::<LE>()? as f64;
            }
            samples.push(Sample::from_padded(Matrix::from_vec(frames, dim, data)?, label));
        }
        let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        Ok(Self {
            dim,
            classes,
            samples,
            masking: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl BatchSource for SeqDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    /// Shorter samples are left-padded with zero frames up to the longest
    /// sample in the batch.
    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let samples: Vec<&Sample> = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let steps = samples.iter().map(|s| s.frames()).max().unwrap_or(0);
        let b = samples.len();
        let mut inputs = vec![Matrix::zeros(b, self.dim); steps];
        let mut mask = vec![vec![false; b]; steps];
        for (row, s) in samples.iter().enumerate() {
            let offset = steps - s.frames();
            for t in 0..s.frames() {
                inputs[offset + t].row_mut(row).copy_from_slice(s.features.row(t));
                mask[offset + t][row] = s.mask[t];
            }
        }
        Ok(Batch {
            inputs,
            targets: Targets::Final(samples.iter().map(|s| s.label).collect()),
            mask: self.masking.then_some(mask),
        })
    }
}

/// Per-dimension mean and standard deviation over unmasked frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &SeqDataset) -> Self {
        let d = data.dim;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for s in &data.samples {
            for t in (0..s.frames()).filter(|&t| s.mask[t]) {
                for (j, &v) in s.features.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    /// Normalizes unmasked frames; padding stays zero.
    pub fn apply(&self, data: &mut SeqDataset) {
        for s in &mut data.samples {
            for t in 0..s.features.rows() {
                if !s.mask[t] {
                    continue;
                }
                for (j, v) in s.features.row_mut(t).iter_mut().enumerate() {
                    *v = (*v - self.mean[j]) / self.std[j];
                }
            }
        }
    }
}

/// Synthetic stand-in for a spoken-digit task: each class is a bank of
/// sinusoids (one per channel) with class-specific frequency and phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            frames: 30,
            dim: 8,
            noise: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.synth.classes", "need at least 2 classes"));
        }
        if self.frames < 2 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::config("data.synth", "frames ≥ 2, dim ≥ 1, per_class ≥ 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.synth.noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Noise-free class templates, `frames × dim` each.
pub fn synth_templates(cfg: &SynthConfig) -> Vec<Matrix> {
    let mut rng = Rng::for_stream(cfg.seed, Stream::Data);
    (0..cfg.classes)
        .map(|_| {
            let params: Vec<(f64, f64)> = (0..cfg.dim)
                .map(|_| (rng.uniform_range(0.05, 0.6), rng.uniform_range(0.0, TAU)))
                .collect();
            Matrix::from_fn(cfg.frames, cfg.dim, |t, d| {
                let (w, phi) = params[d];
                (w * t as f64 + phi).sin()
            })
        })
        .collect()
}

/// Samples are templates plus noise, cut to a random length in
/// `[frames/2, frames]` and left-padded with zeros. Order is shuffled.
pub fn synth_classification(cfg: &SynthConfig) -> Result<SeqDataset> {
    cfg.validate()?;
    let templates = synth_templates(cfg);
    let mut rng = Rng::with_stream_id(cfg.seed, Stream::Data as u64 + 16);
    let mut labels: Vec<usize> = (0..cfg.classes).flat_map(|k| vec![k; cfg.per_class]).collect();
    rng.shuffle(&mut labels);
    let min_len = cfg.frames / 2;
    let mut data = SeqDataset::new(cfg.dim, cfg.classes);
    for label in labels {
        let len = min_len + rng.below(cfg.frames - min_len + 1);
        let offset = cfg.frames - len;
        let mut features = Matrix::zeros(cfg.frames, cfg.dim);
        for t in 0..len {
            for d in 0..cfg.dim {
                features.set(offset + t, d, templates[label].get(t, d) + cfg.noise * rng.normal());
            }
        }
        let mask = (0..cfg.frames).map(|t| t >= offset).collect();
        data.push(Sample { features, label, mask })?;
    }
    Ok(data)
}
