use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use super::{AdamState, EarlyStopper, Precision, TrainState};
use crate::cells::{CellConfig, Network, Role, WeightGroup};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::quantize::{Method, PackedTensor};

const MAGIC: &[u8; 4] = b"QRNN";
pub const CHECKPOINT_VERSION: u16 = 1;
const MAX_HEADER: usize = 16 << 20;
const MAX_ENTRIES: usize = 1 << 28;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    output_size: usize,
    precision: Precision,
    #[serde(default)]
    config: String,
    cell: CellConfig,
}

/// A network, the document it was configured from, and optionally the
/// optimizer state for resuming.
///
/// Layout (little-endian): magic `QRNN`, u16 version, u32-length TOML
/// header; per group: u16-length name, u8 role tag, u32 rows, u32 cols,
/// master values (f32 or f64), u8 flag and u32-length `QPKT` container of
/// the deterministic image; then u8 flag and the training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub precision: Precision,
    /// The run configuration document, stored verbatim.
    pub config: String,
    pub state: Option<TrainState>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

fn write_rng<W: Write>(w: &mut W, rng: &Rng) -> Result<()> {
    w.write_u64::<LE>(rng.seed())?;
    w.write_u64::<LE>(rng.stream_id())?;
    w.write_u128::<LE>(rng.word_pos())?;
    Ok(())
}

fn read_rng<R: Read>(r: &mut R) -> Result<Rng> {
    let seed = r.read_u64::<LE>()?;
    let stream = r.read_u64::<LE>()?;
    let pos = r.read_u128::<LE>()?;
    Ok(Rng::restore(seed, stream, pos))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    pub fn new(network: Network, precision: Precision, config: impl Into<String>) -> Self {
        Self {
            network,
            precision,
            config: config.into(),
            state: None,
        }
    }

    pub fn with_state(mut self, state: TrainState) -> Self {
        self.state = Some(state);
        self
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let net = &self.network;
        let header = toml::to_string(&Header {
            output_size: net.output_size,
            precision: self.precision,
            config: self.config.clone(),
            cell: net.cell.clone(),
        })
        .map_err(|e| err(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(CHECKPOINT_VERSION)?;
        w.write_u32::<LE>(header.len() as u32)?;
        w.write_all(header.as_bytes())?;

        w.write_u32::<LE>(net.groups.len() as u32)?;
        for g in &net.groups {
            w.write_u16::<LE>(g.name.len() as u16)?;
            w.write_all(g.name.as_bytes())?;
            w.write_u8(g.role.tag())?;
            w.write_u32::<LE>(g.master.rows() as u32)?;
            w.write_u32::<LE>(g.master.cols() as u32)?;
            for &v in g.master.data() {
                match self.precision {
                    Precision::F32 => w.write_f32::<LE>(v as f32)?,
                    Precision::F64 => w.write_f64::<LE>(v)?,
                }
            }
            match g.quantizer.filter(|q| q.method != Method::Identity) {
                Some(q) => {
                    let packed = PackedTensor::pack(&q.apply_deterministic(&g.master), &q)?.to_bytes();
                    w.write_u8(1)?;
                    w.write_u32::<LE>(packed.len() as u32)?;
                    w.write_all(&packed)?;
                }
                None => w.write_u8(0)?,
            }
        }

        match &self.state {
            None => w.write_u8(0)?,
            Some(s) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(s.adam.step)?;
                w.write_u32::<LE>(s.epoch as u32)?;
                let st = &s.stopper;
                w.write_u32::<LE>(st.patience as u32)?;
                w.write_u8(st.higher_is_better as u8)?;
                w.write_u8(st.best.is_some() as u8)?;
                w.write_f64::<LE>(st.best.unwrap_or(0.0))?;
                w.write_u32::<LE>(st.best_epoch as u32)?;
                w.write_u32::<LE>(st.stale as u32)?;
                for m in s.adam.m.iter().chain(&s.adam.v) {
                    for &v in m.data() {
                        w.write_f64::<LE>(v)?;
                    }
                }
                write_rng(w, &s.quant_rng)?;
                write_rng(w, &s.shuffle_rng)?;
            }
        }
        Ok(())
    }

    /// Forward images are set to the stored deterministic images (or the
    /// masters for unquantized groups).
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.read_u16::<LE>()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LE>()? as usize;
        if len > MAX_HEADER {
            return Err(err("header too large"));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|_| err("header is not UTF-8"))?;
        let header: Header = toml::from_str(&text).map_err(|e| err(e.to_string()))?;

        let count = r.read_u32::<LE>()? as usize;
        if count != header.cell.group_count() + 2 {
            return Err(err(format!("{count} weight groups for a {:?} cell", header.cell.kind)));
        }
        let mut groups = Vec::with_capacity(count);
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LE>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| err("group name is not UTF-8"))?;
            let role = Role::from_tag(r.read_u8()?).ok_or_else(|| err("unknown role tag"))?;
            let rows = r.read_u32::<LE>()? as usize;
            let cols = r.read_u32::<LE>()? as usize;
            let n = rows.checked_mul(cols).filter(|&n| n <= MAX_ENTRIES).ok_or_else(|| err("group too large"))?;
            let data = match header.precision {
                Precision::F32 => {
                    let mut v = vec![0f32; n];
                    r.read_f32_into::<LE>(&mut v)?;
                    v.into_iter().map(f64::from).collect()
                }
                Precision::F64 => read_f64s(r, n)?,
            };
            let image = match r.read_u8()? {
                0 => None,
                1 => {
                    let len = r.read_u32::<LE>()? as usize;
                    if len > MAX_ENTRIES {
                        return Err(err("packed image too large"));
                    }
                    let mut bytes = vec![0u8; len];
                    r.read_exact(&mut bytes)?;
                    let img = PackedTensor::from_bytes(&bytes)?.unpack()?;
                    if img.shape() != (rows, cols) {
                        return Err(err(format!("packed image of `{name}` has the wrong shape")));
                    }
                    Some(img)
                }
                _ => return Err(err("bad packed-image flag")),
            };
            groups.push(WeightGroup::new(name, role, Matrix::from_vec(rows, cols, data)?));
            images.push(image);
        }
        let mut network = Network::from_groups(header.cell, header.output_size, groups)?;
        network.assign_quantizers();
        for (g, img) in network.groups.iter_mut().zip(images) {
            if let Some(img) = img {
                g.quantized = img;
            }
        }

        let state = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LE>()?;
                let epoch = r.read_u32::<LE>()? as usize;
                let patience = r.read_u32::<LE>()? as usize;
                let higher_is_better = r.read_u8()? != 0;
                let has_best = r.read_u8()? != 0;
                let best = r.read_f64::<LE>()?;
                let best_epoch = r.read_u32::<LE>()? as usize;
                let stale = r.read_u32::<LE>()? as usize;
                let mut moments = Vec::with_capacity(2 * count);
                for _ in 0..2 {
                    for g in &network.groups {
                        let (rows, cols) = g.shape();
                        moments.push(Matrix::from_vec(rows, cols, read_f64s(r, rows * cols)?)?);
                    }
                }
                let v = moments.split_off(count);
                Some(TrainState {
                    adam: AdamState { m: moments, v, step },
                    epoch,
                    stopper: EarlyStopper {
                        patience,
                        higher_is_better,
                        best: has_best.then_some(best),
                        best_epoch,
                        stale,
                    },
                    quant_rng: read_rng(r)?,
                    shuffle_rng: read_rng(r)?,
                })
            }
            _ => return Err(err("bad state flag")),
        };
        Ok(Self {
            network,
            precision: header.precision,
            config: header.config,
            state,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let ck = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellKind, Sampling, Scope};
    use crate::quantize::{QuantizerSpec, Variant};
    use crate::train::{Task, TrainConfig};

    fn network(kind: CellKind, scope: Scope) -> Network {
        let mut rng = Rng::new(8);
        let mut net = Network::new(CellConfig::new(kind, 3, 4).with_scope(scope), 5, &mut rng).unwrap();
        for g in &mut net.groups {
            g.master = g.master.map(|_| rng.uniform_range(-1.0, 1.0));
        }
        net
    }

    #[test]
    fn round_trip_with_state() {
        let scope = Scope {
            output: None,
            ..Scope::all(QuantizerSpec::ternary(Variant::Stochastic))
        };
        let net = network(CellKind::Lstm, scope);
        let cfg = TrainConfig {
            precision: Precision::F64,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&net, &cfg, Task::CharLm);
        state.adam.step = 17;
        state.adam.m[2].set(0, 0, 0.125);
        state.stopper.best = Some(1.25);
        state.quant_rng.uniform();
        let ck = Checkpoint::new(net.clone(), Precision::F64, "seed = 4\n").with_state(state.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, "seed = 4\n");
        assert_eq!(back.state.as_ref().unwrap(), &state);
        let mut expected = net;
        expected.refresh(Sampling::Deterministic, &mut Rng::new(0));
        assert_eq!(back.network, expected);
    }

    #[test]
    fn f32_storage_rounds_masters() {
        let net = network(CellKind::Gru, Scope::none());
        let back = Checkpoint::from_bytes(&Checkpoint::new(net.clone(), Precision::F32, "").to_bytes().unwrap()).unwrap();
        for (a, b) in net.groups.iter().zip(&back.network.groups) {
            assert_eq!(a.master.map(|w| w as f32 as f64), b.master);
        }
        assert!(back.state.is_none());
    }

    #[test]
    fn corruption_is_detected() {
        let net = network(CellKind::Vanilla, Scope::recurrent(QuantizerSpec::binary(Variant::Deterministic)));
        let bytes = Checkpoint::new(net, Precision::F32, "").to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
