use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelBundle, ModelConfig, ModelError};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MARGNMT\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Adam state stored alongside the weights so a run can resume exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// (parameter name, first moment, second moment)
    pub moments: Vec<(String, Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    stage: String,
    step: u64,
    extra: serde_json::Value,
}

/// Weights plus enough metadata to rebuild the bundle and resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: String,
    pub step: u64,
    /// Free-form run configuration, stored verbatim.
    pub extra: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle, stage: impl Into<String>, step: u64) -> Self {
        Self {
            model: bundle.config.clone(),
            stage: stage.into(),
            step,
            extra: serde_json::Value::Null,
            params: bundle.named_params(),
            optimizer: None,
        }
    }

    pub fn bundle(&self) -> std::result::Result<ModelBundle, ModelError> {
        ModelBundle::from_named(self.model.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            stage: self.stage.clone(),
            step: self.step,
            extra: self.extra.clone(),
        })?;
        put_bytes(&mut out, &header);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_u64(&mut out, opt.step);
                put_u64(&mut out, opt.moments.len() as u64);
                for (name, m, v) in &opt.moments {
                    put_bytes(&mut out, name.as_bytes());
                    put_tensor(&mut out, m);
                    put_tensor(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header: Header = serde_json::from_slice(r.bytes_field()?)?;
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u64()? as usize;
                let mut moments = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let name = r.string()?;
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    moments.push((name, m, v));
                }
                Some(OptimizerState { step, moments })
            }
            f => return Err(CheckpointError::Corrupt(format!("optimizer flag {}", f))),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model: header.model, stage: header.stage, step: header.step, extra: header.extra, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes_field()?.to_vec()).map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("tensor rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}
