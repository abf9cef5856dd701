//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `XLNTCKPT`, a little-endian `u32` format
//! version, a `u64` header length, the UTF-8 JSON header, then the raw
//! little-endian tensor payload. The header carries the encoder config, run
//! metadata and an index of `name -> (shape, dtype, offset)` into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, Model};
use crate::optim::AdamState;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"XLNTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    #[default]
    F64,
    F32,
}

impl StorageDtype {
    fn width(self) -> usize {
        match self {
            StorageDtype::F64 => 8,
            StorageDtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    dtype: StorageDtype,
    offset: u64,
}

/// Every random draw is a function of `(seed, stream, counter)`, so the seed
/// and the step counter are the complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    step: u64,
    rng: RngState,
    metadata: BTreeMap<String, serde_json::Value>,
    adam_steps: Option<Vec<u64>>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub rng: RngState,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ModelCheckpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        ModelCheckpoint {
            model,
            optimizer: None,
            step: 0,
            rng: RngState { seed, step: 0 },
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self, dtype: StorageDtype) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, role: Role, t: &Tensor| {
            entries.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: t.shape().to_vec(),
                dtype,
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                match dtype {
                    StorageDtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    StorageDtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        };
        for (_, name, t) in self.model.params.iter() {
            push(name, Role::Param, t);
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.model.params.len() {
                return Err(CheckpointError::Corrupt(
                    "optimizer state does not match parameters".into(),
                ));
            }
            for ((_, name, _), (m, v)) in self.model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                push(name, Role::AdamM, m);
                push(name, Role::AdamV, v);
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            rng: self.rng,
            metadata: self.metadata.clone(),
            adam_steps: self.optimizer.as_ref().map(|o| o.steps.clone()),
            tensors: entries,
            payload_bytes: payload.len() as u64,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(CheckpointError::Corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read_tensor(payload, e)?;
            match e.role {
                Role::Param => {
                    params.insert(e.name.clone(), t);
                }
                Role::AdamM => m.push(t),
                Role::AdamV => v.push(t),
            }
        }
        let optimizer = match header.adam_steps {
            Some(steps) => {
                if m.len() != params.len() || v.len() != params.len() || steps.len() != params.len() {
                    return Err(CheckpointError::Corrupt("incomplete optimizer state".into()));
                }
                Some(AdamState { m, v, steps })
            }
            None => None,
        };
        Ok(ModelCheckpoint {
            model: Model {
                config: header.config,
                params,
            },
            optimizer,
            step: header.step,
            rng: header.rng,
            metadata: header.metadata,
        })
    }

    /// Write through a temporary file and rename, so an interrupted save
    /// never replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path, dtype: StorageDtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_tensor(payload: &[u8], e: &TensorEntry) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let w = e.dtype.width();
    let start = e.offset as usize;
    let end = start + n * w;
    if end > payload.len() {
        return Err(CheckpointError::Corrupt(format!("tensor {} out of bounds", e.name)));
    }
    let raw = &payload[start..end];
    let data: Vec<f64> = match e.dtype {
        StorageDtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        StorageDtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Corrupt(err.to_string()))
}

/// Summary line per tensor: name, shape and L2 norm.
pub fn describe(ckpt: &ModelCheckpoint) -> Vec<String> {
    ckpt.model
        .params
        .iter()
        .map(|(_, name, t)| {
            let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("{name}\t{:?}\t{norm:.6}", t.shape())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt() -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::init(EncoderConfig::tiny(20, 9), 0.3, &mut rng).unwrap();
        let mut opt = AdamState::new(&model.params);
        opt.m[0].data_mut()[0] = 1.0 / 3.0;
        opt.steps[3] = 17;
        let mut c = ModelCheckpoint::new(model, 42);
        c.optimizer = Some(opt);
        c.step = 17;
        c.rng.step = 17;
        c.metadata.insert("note".into(), serde_json::json!("x"));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let bytes = c.to_bytes(StorageDtype::F64).unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        for ((_, _, a), (_, _, b)) in c.model.params.iter().zip(back.model.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes(StorageDtype::F64).unwrap(), bytes);
    }

    #[test]
    fn f32_storage_rounds_values() {
        let c = ckpt();
        let back = ModelCheckpoint::from_bytes(&c.to_bytes(StorageDtype::F32).unwrap()).unwrap();
        let a = c.model.params.by_name("embeddings.word").unwrap();
        let b = back.model.params.by_name("embeddings.word").unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, (*x as f32) as f64);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(ModelCheckpoint::from_bytes(b"nope"), Err(CheckpointError::Magic)));
        let mut bytes = ckpt().to_bytes(StorageDtype::F64).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(CheckpointError::Corrupt(_))));
        let mut bytes = ckpt().to_bytes(StorageDtype::F64).unwrap();
        bytes[8] = 9;
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = ckpt();
        c.save(&p, StorageDtype::F64).unwrap();
        assert_eq!(ModelCheckpoint::load(&p).unwrap(), c);
    }
}
