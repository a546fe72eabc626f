//! Binary checkpoints: magic `SLTC`, version u32, tensor count u32, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dimensions and
//! little-endian f64 data. A JSON footer with the model description and the
//! optimizer and scheduler scalars runs to the end of the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamScalars};
use super::scheduler::PlateauScheduler;
use crate::config::{ModelConfig, Protocol};
use crate::data::Vocabularies;
use crate::model::SignTransformer;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLTC";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

/// Optimization state carried across a save/load.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    protocol: Protocol,
    model: ModelConfig,
    d_in: usize,
    vocabularies: Vocabularies,
    iteration: u64,
    optimizer: AdamScalars,
    scheduler: PlateauScheduler,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(model: &SignTransformer, state: &TrainingState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (id, p) in model.store.iter() {
        tensors.push((p.name.clone(), &p.tensor));
        if p.trainable {
            tensors.push((format!("{MOMENT1}{}", p.name), &state.adam.m[id.index()]));
            tensors.push((format!("{MOMENT2}{}", p.name), &state.adam.v[id.index()]));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        push_tensor(&mut out, name, t)?;
    }
    let footer = Footer {
        protocol: model.protocol,
        model: model.config,
        d_in: model.d_in,
        vocabularies: model.vocabs.clone(),
        iteration: state.iteration,
        optimizer: state.adam.scalars,
        scheduler: state.scheduler,
    };
    serde_json::to_writer(&mut out, &footer).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Rebuilds the model and training state; nothing is returned unless the
/// whole file is valid.
pub fn decode(bytes: &[u8]) -> Result<(SignTransformer, TrainingState)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let footer: Footer = serde_json::from_slice(&bytes[r.pos..])
        .map_err(|e| Error::Checkpoint(format!("footer: {e}")))?;

    let mut model = SignTransformer::new(footer.model, footer.protocol, footer.d_in, footer.vocabularies, 0)
        .map_err(|e| Error::Checkpoint(format!("footer describes an invalid model: {e}")))?;
    let mut adam = Adam {
        scalars: footer.optimizer,
        m: Vec::new(),
        v: Vec::new(),
    };
    adam.m = model.store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
    adam.v = adam.m.clone();
    let mut seen = vec![false; model.store.len()];
    for (name, t) in tensors {
        let (slot, base) = if let Some(base) = name.strip_prefix(MOMENT1) {
            (1, base)
        } else if let Some(base) = name.strip_prefix(MOMENT2) {
            (2, base)
        } else {
            (0, name.as_str())
        };
        let id = model
            .store
            .find(base)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        match slot {
            0 => {
                seen[id.index()] = true;
                model.store.set(id, t)?;
            }
            1 => adam.m[id.index()] = t,
            _ => adam.v[id.index()] = t,
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "missing tensor {}",
            model.store.iter().nth(missing).map(|(_, p)| p.name.as_str()).unwrap_or("?")
        )));
    }
    Ok((
        model,
        TrainingState {
            iteration: footer.iteration,
            adam,
            scheduler: footer.scheduler,
        },
    ))
}

pub fn save(path: &Path, model: &SignTransformer, state: &TrainingState) -> Result<()> {
    let bytes = encode(model, state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(SignTransformer, TrainingState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
