//! Versioned flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "VQBRCKPT"
//! version  u32
//! header   u64 length + JSON (model config, plan echo, optimizer scalars)
//! count    u64 number of arrays
//! arrays   count × { u32 name length, name, u32 rank, rank × u64 dims,
//!                    u64 element count, element count × f64 }
//! digest   32 bytes, SHA-256 of everything above
//! ```
//!
//! Parameters are stored under their own names; optimizer moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StagePlan, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{AsrModel, ModelConfig};
use crate::nn::Adam;
use crate::rng::seeded;

pub const MAGIC: &[u8; 8] = b"VQBRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    plan: Option<StagePlan>,
    lora: bool,
    adam_step: u64,
    adam_peak_lr: f64,
    adam_warmup: u64,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AsrModel,
    pub adam: Adam,
    /// Absent for a pretrained LM that has not entered ASR training.
    pub plan: Option<StagePlan>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        let plan = self
            .plan
            .ok_or_else(|| Error::config("checkpoint holds a pretrained LM, not a training state"))?;
        Ok(TrainState {
            model: self.model,
            adam: self.adam,
            plan,
        })
    }
}

pub fn encode_checkpoint(model: &AsrModel, adam: &Adam, plan: Option<&StagePlan>) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config,
        plan: plan.cloned(),
        lora: model.decoder.has_lora(),
        adam_step: adam.step,
        adam_peak_lr: adam.peak_lr,
        adam_warmup: adam.warmup,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    for (id, p) in model.store.iter() {
        arrays.push((p.name.clone(), p.value.as_ref()));
        if let Some((m, v)) = adam.moments(id.index()) {
            arrays.push((format!("adam.m/{}", p.name), m));
            arrays.push((format!("adam.v/{}", p.name), v));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::data(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_arrays(r: &mut Reader<'_>, body_end: usize) -> Result<Vec<(String, Tensor)>> {
    let count = r.u64("array count")?;
    let mut arrays = Vec::new();
    for i in 0..count {
        let name_len = r.u32(&format!("name of array {i}"))? as usize;
        let name = String::from_utf8(r.take(name_len, &format!("name of array {i}"))?.to_vec())
            .map_err(|_| Error::data(format!("array {i} has a non-UTF-8 name")))?;
        let rank = r.u32(&format!("rank of array {name}"))? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::data(format!("array {name}: invalid rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&format!("dims of array {name}"))? as usize);
        }
        let len = r.u64(&format!("length of array {name}"))? as usize;
        let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if expected != Some(len) {
            return Err(Error::data(format!(
                "array {name}: length field {len} does not match shape {dims:?}"
            )));
        }
        if len.checked_mul(8).is_none_or(|bytes| bytes > body_end - r.pos) {
            return Err(Error::data(format!(
                "array {name}: length field {len} runs past the end of the file"
            )));
        }
        let bytes = r.take(len * 8, &format!("data of array {name}"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::data(format!("array {name}: {e}")))?;
        arrays.push((name, t));
    }
    Ok(arrays)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 + 32 || &buf[..8] != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic header)"));
    }
    let body_end = buf.len() - 32;
    let mut r = Reader {
        buf: &buf[..body_end],
        pos: 8,
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = r.u64("header length")? as usize;
    if header_len > r.remaining() {
        return Err(Error::data("checkpoint header length runs past the end of the file"));
    }
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    let arrays = decode_arrays(&mut r, body_end)?;
    if r.remaining() != 0 {
        return Err(Error::data("checkpoint has trailing bytes after the last array"));
    }
    if Sha256::digest(&buf[..body_end]).as_slice() != &buf[body_end..] {
        return Err(Error::data("checkpoint checksum mismatch (corrupted payload)"));
    }

    let mut model = AsrModel::new(header.model, 0)?;
    if header.lora {
        model
            .decoder
            .attach_lora(&mut model.store, header.model.lora_rank, &mut seeded(0))?;
    }
    let mut adam = Adam::new(header.adam_peak_lr, header.adam_warmup);
    adam.step = header.adam_step;
    let mut seen = vec![false; model.store.len()];
    let mut moments: Vec<(usize, Option<Tensor>, Option<Tensor>)> = Vec::new();
    for (name, t) in arrays {
        let (target, slot) = match name.split_once('/') {
            Some(("adam.m", p)) => (p, 1),
            Some(("adam.v", p)) => (p, 2),
            _ => (name.as_str(), 0),
        };
        let id = model
            .store
            .find(target)
            .ok_or_else(|| Error::data(format!("array {name} does not belong to this model")))?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::data(format!(
                "array {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        match slot {
            0 => {
                model.store.set_value(id, t);
                seen[id.index()] = true;
            }
            _ => {
                let idx = id.index();
                let entry = match moments.iter_mut().find(|m| m.0 == idx) {
                    Some(e) => e,
                    None => {
                        moments.push((idx, None, None));
                        moments.last_mut().unwrap()
                    }
                };
                if slot == 1 {
                    entry.1 = Some(t);
                } else {
                    entry.2 = Some(t);
                }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.store.iter().nth(i).unwrap().1.name;
        return Err(Error::data(format!("checkpoint is missing array {name}")));
    }
    for (idx, m, v) in moments {
        match (m, v) {
            (Some(m), Some(v)) => adam.set_moments(idx, m, v),
            _ => return Err(Error::data("checkpoint has an unpaired optimizer moment")),
        }
    }
    Ok(Checkpoint {
        model,
        adam,
        plan: header.plan,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &AsrModel, adam: &Adam, plan: Option<&StagePlan>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, adam, plan)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
