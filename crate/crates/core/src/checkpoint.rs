//! Checkpoint files: a magic line, one JSON header line with the model
//! configuration and block shapes, then every block as row-major
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Matrix, Parameters};

pub const CHECKPOINT_MAGIC: &str = "MRGS-CKPT-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub blocks: Vec<BlockShape>,
    pub seed: u64,
    pub config_fingerprint: String,
    pub data_fingerprint: String,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        model: ModelConfig,
        params: ModelParams,
        seed: u64,
        config_fingerprint: &str,
        data_fingerprint: &str,
        best_epoch: usize,
    ) -> Result<Self> {
        params.check_shapes(&model)?;
        let blocks = params
            .blocks()
            .into_iter()
            .map(|(name, m)| BlockShape {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Ok(Checkpoint {
            header: CheckpointHeader {
                model,
                blocks,
                seed,
                config_fingerprint: config_fingerprint.to_string(),
                data_fingerprint: data_fingerprint.to_string(),
                best_epoch,
            },
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = format!("{CHECKPOINT_MAGIC}\n{header}\n").into_bytes();
        for (_, m) in self.params.blocks() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(1, "missing magic line".into()))?;
        if &bytes[..magic_end] != CHECKPOINT_MAGIC.as_bytes() {
            return Err(bad(1, format!("expected magic '{CHECKPOINT_MAGIC}'")));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(2, "missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..header_end]).map_err(|e| bad(2, format!("header: {e}")))?;
        let mut params = ModelParams::init(&header.model, 0)?;
        let body = &rest[header_end + 1..];
        let expected: usize = header.blocks.iter().map(|b| b.rows * b.cols * 8).sum();
        if body.len() != expected {
            return Err(bad(3, format!("payload has {} bytes, header implies {expected}", body.len())));
        }
        let mut offset = 0;
        let slots = params.blocks_mut();
        if slots.len() != header.blocks.len() {
            return Err(bad(2, "block list does not match the model configuration".into()));
        }
        for ((name, slot), shape) in slots.into_iter().zip(&header.blocks) {
            if name != shape.name || slot.shape() != (shape.rows, shape.cols) {
                return Err(bad(2, format!("block '{}' does not match '{name}' {:?}", shape.name, slot.shape())));
            }
            let n = shape.rows * shape.cols;
            let data = body[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *slot = Matrix::from_vec(shape.rows, shape.cols, data)?;
            offset += 8 * n;
        }
        if !params.all_finite() {
            return Err(bad(3, "non-finite parameter values".into()));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
