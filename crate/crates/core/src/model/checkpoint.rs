//! Binary checkpoint files.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic          8 bytes   b"SSLCKPT\0"
//! version        u32       currently 1
//! config_len     u32       byte length of the following JSON
//! config         bytes     EncoderConfig as UTF-8 JSON
//! iteration      u64
//! rng.seed       32 bytes  ChaCha8 key
//! rng.stream     u64
//! rng.word_pos   u128
//! tensor_count   u32
//! per tensor:
//!   name_len     u32
//!   name         bytes     UTF-8
//!   ndim         u32
//!   dims         u64 × ndim
//!   payload      f32 × prod(dims), little-endian IEEE-754
//! ```
//!
//! Student tensors carry their encoder names (`block0.conv.weight`, ...).
//! Any extra state uses a prefix, e.g. `teacher.` or `velocity.`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{EncoderConfig, ModelError, ModelParams, NamedTensor};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor<f32>>,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f32>, iteration: u64, rng: RngState) -> Self {
        Self { config: params.config().clone(), tensors: params.tensors().to_vec(), iteration, rng }
    }

    /// Appends tensors under `prefix` (e.g. the EMA teacher).
    pub fn with_prefixed(mut self, prefix: &str, params: &ModelParams<f32>) -> Self {
        self.tensors.extend(params.tensors().iter().map(|t| NamedTensor {
            name: format!("{prefix}{}", t.name),
            tensor: t.tensor.clone(),
        }));
        self
    }

    /// Rebuilds the parameter set stored under `prefix` (`""` for the student).
    pub fn params(&self, prefix: &str) -> Result<ModelParams<f32>, CheckpointError> {
        let layout_names: Vec<String> = super::build_encoder::<f32>(&self.config, 0)?
            .tensors()
            .iter()
            .map(|t| format!("{prefix}{}", t.name))
            .collect();
        let mut tensors = Vec::with_capacity(layout_names.len());
        for name in layout_names {
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            tensors.push(NamedTensor { name: t.name[prefix.len()..].to_string(), tensor: t.tensor.clone() });
        }
        Ok(ModelParams::from_tensors(self.config.clone(), tensors)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.tensor.ndim() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let config_len = read_u32(&mut r)? as usize;
        let config_bytes = take(&mut r, config_len)?;
        let config: EncoderConfig =
            serde_json::from_slice(config_bytes).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
        let iteration = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        read_exact(&mut r, &mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        read_exact(&mut r, &mut wp)?;
        let rng = RngState { seed, stream, word_pos: u128::from_le_bytes(wp) };
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = dims.iter().product();
            let payload = take(&mut r, numel.checked_mul(4).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(dims, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            tensors.push(NamedTensor { name, tensor });
        }
        if !r.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, tensors, iteration, rng })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Format("unexpected end of file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
