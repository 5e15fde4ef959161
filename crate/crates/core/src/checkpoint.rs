//! Model checkpoint file.
//!
//! ```text
//! magic "CTOPCKPT" | u32 version | u32 len + JSON hyperparameters
//! | u32 tensor count | per tensor: u32 rows, u32 cols, rows*cols f32
//! ```
//!
//! Tensors follow the model's parameter declaration order; all integers and
//! floats are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smoe::{ModelConfig, ModelError, SMoEModel};

pub const MAGIC: &[u8; 8] = b"CTOPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Hyperparameter block stored as JSON in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub param_names: Vec<String>,
    /// Temperature fitted on validation, if calibration ran.
    pub temperature: Option<f64>,
    pub tuned_threshold: Option<f64>,
}

pub fn to_bytes(
    model: &SMoEModel,
    temperature: Option<f64>,
    tuned_threshold: Option<f64>,
) -> Vec<u8> {
    let header = Header {
        model: model.config.clone(),
        param_names: model.layout.names.clone(),
        temperature,
        tuned_threshold,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + json.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
        for x in p.iter() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(SMoEModel, Header), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * 4)?;
        let values = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.push(Array2::from_shape_vec((rows, cols), values).expect("length checked"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    let model = SMoEModel::from_params(header.model.clone(), params)?;
    Ok((model, header))
}

pub fn save(
    path: &Path,
    model: &SMoEModel,
    temperature: Option<f64>,
    tuned_threshold: Option<f64>,
) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(model, temperature, tuned_threshold))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(SMoEModel, Header), CheckpointError> {
    from_bytes(&fs::read(path)?)
}
