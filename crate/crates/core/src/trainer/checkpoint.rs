//! Binary checkpoints.
//!
//! Layout, little-endian throughout: magic `GTRNCKPT`, `u32` version,
//! `u32` tensor count, then per tensor `u16` name length, name bytes,
//! `u8` rank, `u32` dims, `f32` payload; finally a `u32`-length-prefixed
//! UTF-8 JSON snapshot. Optimizer moments are stored as ordinary tensors
//! named `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GenTron, GenTronConfig, Layout};
use crate::numerics::{Rng, Tensor};
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 8] = b"GTRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the model: {0}")]
    ShapeTable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type CkResult<T> = Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    config: GenTronConfig,
    inflated: bool,
    optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GenTronConfig,
    pub inflated: bool,
    /// Model tensors in layout order.
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &GenTron, optimizer: Option<&AdamState>) -> Self {
        Self {
            config: model.config().clone(),
            inflated: model.is_inflated(),
            tensors: model.store().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let moment_names: Vec<(String, String)> =
            self.tensors.iter().map(|(n, _)| (format!("optim.m.{n}"), format!("optim.v.{n}"))).collect();
        if let Some(opt) = &self.optimizer {
            for (i, (mn, vn)) in moment_names.iter().enumerate() {
                all.push((mn, &opt.m[i]));
                all.push((vn, &opt.v[i]));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let snap = Snapshot {
            config: self.config.clone(),
            inflated: self.inflated,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&snap).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let mut moments: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            if rank == 0 {
                return Err(CheckpointError::Corrupt(format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| if d == 0 { None } else { a.checked_mul(d) })
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` has bad shape {shape:?}")))?;
            let payload = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if name.starts_with("optim.") {
                moments.push((name, t));
            } else {
                tensors.push((name, t));
            }
        }
        let len = r.u32()? as usize;
        let snap: Snapshot = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("config snapshot: {e}")))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let optimizer = match snap.optimizer_step {
            None if moments.is_empty() => None,
            None => return Err(CheckpointError::Corrupt("moments without an optimizer step".into())),
            Some(step) => Some(assemble_moments(step, &tensors, moments)?),
        };
        Ok(Self { config: snap.config, inflated: snap.inflated, tensors, optimizer })
    }

    fn build(self, inflated: bool) -> CkResult<GenTron> {
        let (_, specs) = Layout::build(&self.config, inflated);
        if specs.len() != self.tensors.len() {
            return Err(CheckpointError::ShapeTable(format!(
                "model expects {} tensors, checkpoint has {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(CheckpointError::ShapeTable(format!(
                    "expected `{}` {:?}, found `{name}` {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        GenTron::from_tensors(self.config, inflated, self.tensors)
            .map_err(|e| CheckpointError::ShapeTable(e.to_string()))
    }

    /// Text-to-image model; a video checkpoint is rejected.
    pub fn into_t2i(self) -> CkResult<GenTron> {
        self.build(false)
    }

    /// Text-to-video model; an image checkpoint is inflated on load.
    pub fn into_t2v(self, rng: &mut Rng) -> CkResult<GenTron> {
        if self.inflated {
            self.build(true)
        } else {
            self.build(false)?.inflate(rng).map_err(|e| CheckpointError::ShapeTable(e.to_string()))
        }
    }

    /// Whichever model the checkpoint describes.
    pub fn into_model(self) -> CkResult<GenTron> {
        let inflated = self.inflated;
        self.build(inflated)
    }
}

fn assemble_moments(step: u64, tensors: &[(String, Tensor)], moments: Vec<(String, Tensor)>) -> CkResult<AdamState> {
    if moments.len() != 2 * tensors.len() {
        return Err(CheckpointError::ShapeTable("optimizer moments do not cover every parameter".into()));
    }
    let mut m = Vec::with_capacity(tensors.len());
    let mut v = Vec::with_capacity(tensors.len());
    for ((name, t), pair) in tensors.iter().zip(moments.chunks(2)) {
        let (mn, vn) = (format!("optim.m.{name}"), format!("optim.v.{name}"));
        if pair[0].0 != mn || pair[1].0 != vn || pair[0].1.shape() != t.shape() || pair[1].1.shape() != t.shape() {
            return Err(CheckpointError::ShapeTable(format!("optimizer moments for `{name}` are malformed")));
        }
        m.push(pair[0].1.clone());
        v.push(pair[1].1.clone());
    }
    Ok(AdamState { step, m, v })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> CkResult<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> CkResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(model: &GenTron, optimizer: Option<&AdamState>, path: impl AsRef<Path>) -> CkResult<()> {
    fs::write(path, Checkpoint::from_model(model, optimizer).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> CkResult<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
