//! Versioned binary checkpoint with a named tensor table.
//!
//! Little-endian layout:
//!
//! ```text
//! "CAFC" | version u32 = 1 | dtype u8 | header_len u32 | header JSON
//! tensor_count u32
//! per tensor: name_len u32 | name (UTF-8) | ndim u32 | ndim × u32 dims | values
//! CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Tensor names are the parameter names prefixed with `param/`, `adam.m/`,
//! `adam.v/` or `best/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::bundle_io::Cursor;
use crate::error::{Error, FormatError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;
use crate::optim::AdamState;
use crate::scalar::{DType, Scalar};
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"CAFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub state: TrainState,
}

struct Tensor<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

fn collect<'a>(prefix: &str, model: &'a Model<f32>, out: &mut Vec<Tensor<'a>>) {
    for t in model.views() {
        out.push(Tensor {
            name: format!("{prefix}/{}", t.name),
            shape: t.shape,
            data: t.data,
        });
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let s = &ck.state;
    let header = CheckpointHeader {
        model: s.model.config.clone(),
        train: ck.train.clone(),
        epoch: s.epoch,
        step: s.step,
        adam_t: s.adam.t,
        best_val_accuracy: s.best_val_accuracy,
        best_epoch: s.best_epoch,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");

    let mut tensors = Vec::new();
    collect("param", &s.model, &mut tensors);
    let views = s.model.views();
    for (which, moments) in [("adam.m", &s.adam.m), ("adam.v", &s.adam.v)] {
        for (v, data) in views.iter().zip(moments.iter()) {
            tensors.push(Tensor {
                name: format!("{which}/{}", v.name),
                shape: v.shape.clone(),
                data,
            });
        }
    }
    collect("best", &s.best, &mut tensors);

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DType::F32 as u8);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data {
            v.put_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

fn fill(prefix: &str, model: &mut Model<f32>, table: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<(), FormatError> {
    for t in model.views_mut() {
        let key = format!("{prefix}/{}", t.name);
        let (shape, data) = table.remove(&key).ok_or_else(|| malformed(format!("missing tensor {key}")))?;
        if shape != t.shape {
            return Err(malformed(format!("{key}: stored shape {shape:?}, expected {:?}", t.shape)));
        }
        t.data.copy_from_slice(&data);
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let mut cur = Cursor {
        bytes,
        pos: 4,
        end: bytes.len().saturating_sub(4).max(4),
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dtype = cur.take(1)?[0];
    if DType::from_tag(dtype) != Some(DType::F32) {
        return Err(malformed(format!("unsupported dtype tag {dtype}")));
    }
    let header_len = cur.u32()? as usize;
    let header_bytes = cur.take(header_len)?;
    let count = cur.u32()? as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?
            .to_string();
        let ndim = cur.u32()? as usize;
        if ndim > 8 {
            return Err(malformed(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("tensor size overflow"))?;
        let data = cur.f32s(numel)?;
        table.insert(name, (shape, data));
    }
    if cur.pos != cur.end || bytes.len() < cur.end + 4 {
        return Err(if bytes.len() < cur.pos + 4 {
            FormatError::Truncated {
                offset: cur.pos,
                needed: 4,
                available: bytes.len().saturating_sub(cur.pos),
            }
        } else {
            malformed(format!("{} trailing bytes", cur.end - cur.pos))
        });
    }
    let stored = u32::from_le_bytes(bytes[cur.end..cur.end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..cur.end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }

    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| malformed(format!("header: {e}")))?;
    let mut model = Model::<f32>::init(header.model.clone(), 0).map_err(|e| malformed(format!("model config: {e}")))?;
    fill("param", &mut model, &mut table)?;
    let mut best = model.clone();
    fill("best", &mut best, &mut table)?;
    let mut adam = AdamState::new(&model);
    adam.t = header.adam_t;
    for (which, moments) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
        for (name, buf) in adam.names.iter().zip(moments.iter_mut()) {
            let key = format!("{which}/{name}");
            let (_, data) = table.remove(&key).ok_or_else(|| malformed(format!("missing tensor {key}")))?;
            if data.len() != buf.len() {
                return Err(malformed(format!("{key}: {} values, expected {}", data.len(), buf.len())));
            }
            buf.copy_from_slice(&data);
        }
    }
    if let Some(extra) = table.keys().next() {
        return Err(malformed(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        train: header.train,
        state: TrainState {
            model,
            adam,
            epoch: header.epoch,
            step: header.step,
            best,
            best_val_accuracy: header.best_val_accuracy,
            best_epoch: header.best_epoch,
        },
    })
}

/// Writes through a temporary file and rename, so an interrupted write
/// leaves the previous checkpoint intact.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            slots: 4,
            k: 2,
            variant: Variant::Ours,
            ..ModelConfig::for_features(6, 3)
        };
        let mut state = TrainState::new(cfg, 5).unwrap();
        state.epoch = 3;
        state.step = 17;
        state.adam.t = 17;
        state.adam.m[0][1] = 0.25;
        state.adam.v[2][0] = 1e-6;
        state.best.classifier.l3.b[1] = 4.0;
        state.best_val_accuracy = 0.5;
        state.best_epoch = 2;
        Checkpoint {
            train: TrainConfig::default(),
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck);
        assert_eq!(&bytes[..4], b"CAFC");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&sample());
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert_eq!(decode_checkpoint(&flipped).unwrap_err().code(), 4);
        assert_eq!(decode_checkpoint(&bytes[..bytes.len() - 9]).unwrap_err().code(), 3);
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(decode_checkpoint(&magic).unwrap_err().code(), 1);
        let mut version = bytes;
        version[4] = 9;
        assert_eq!(decode_checkpoint(&version).unwrap_err().code(), 2);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cafc");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(!dir.path().join("model.cafc.tmp").exists());
    }
}
