//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"QUNETPP1"
//! u64 json_len, json_len bytes of UTF-8 JSON metadata
//! u32 param_count
//! per parameter:
//!     u32 name_len, name bytes
//!     u8  dtype (0 = f32), u8 trainable
//!     u32 ndim, ndim × u64 dims
//!     prod(dims) × f32 row-major data
//! ```
//!
//! Batch-norm running statistics are stored alongside the trainable
//! parameters so inference is reproduced exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::training::LossHistory;

const MAGIC: &[u8; 8] = b"QUNETPP1";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: LossHistory,
}

pub fn encode(model: &SegModel, epoch: usize, history: &LossHistory) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        seed: model.seed,
        epoch,
        loss_history: history.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out =
        Vec::with_capacity(json.len() + 4 * model.store.params.iter().map(|p| p.data.len()).sum::<usize>() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.params.len() as u32).to_le_bytes());
    for p in &model.store.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from `bytes`, checking every stored array against
/// the topology implied by the stored config.
pub fn decode(bytes: &[u8]) -> Result<(SegModel, CheckpointMeta)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let json_len = c.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(json_len)?)?;
    let mut model = SegModel::build(meta.config.clone(), meta.seed)?;
    let count = c.u32()? as usize;
    if count != model.store.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} arrays stored, topology has {}",
            model.store.params.len()
        )));
    }
    for p in model.store.params.iter_mut() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected {}, found {name}", p.name)));
        }
        if c.u8()? != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let trainable = c.u8()? != 0;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != p.shape || trainable != p.trainable {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?} does not match {:?}",
                p.shape
            )));
        }
        let raw = c.take(4 * p.data.len())?;
        for (v, b) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &SegModel, epoch: usize, history: &LossHistory) -> Result<()> {
    let bytes = encode(model, epoch, history)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochLoss;

    fn model() -> SegModel {
        let cfg = ModelConfig {
            input_size: 16,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let mut m = SegModel::build(cfg, 7).unwrap();
        m.store.params[3].data[0] = f32::from_bits(0x3f80_0001);
        m
    }

    #[test]
    fn bit_exact_round_trip() {
        let m = model();
        let h = LossHistory {
            epochs: vec![EpochLoss {
                epoch: 1,
                levels: [-0.1, -0.2, -0.3, -0.4],
                combined: -0.25,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &m, 1, &h).unwrap();
        let (back, meta) = load(&path).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(meta.loss_history, h);
        assert_eq!(meta.epoch, 1);
        assert_eq!(encode(&back, 1, &h).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&model(), 0, &LossHistory::default()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
