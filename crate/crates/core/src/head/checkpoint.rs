//! Binary head checkpoints.
//!
//! Layout, all little-endian:
//! `b"ITIH" | version u32 | feature_dim u32 | h1 u32 | h2 u32 | weights f64...`
//! with weights in [`HeadParams`] order. A JSON sidecar at `<path>.json`
//! carries the conditioning mode, init seed and training config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Conditioning, HeadParams, HeadShape, TrainConfig};
use crate::jsonl::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ITIH";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub feature_dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub conditioning: Conditioning,
    pub init_seed: u64,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a head checkpoint (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported checkpoint version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: expected {expected} weight bytes, found {got}")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{path}: sidecar: {message}")]
    Sidecar { path: PathBuf, message: String },
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &HeadParams) -> Vec<u8> {
    let s = params.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.values().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, s.feature_dim as u32, s.h1 as u32, s.h2 as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in params.values() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8], conditioning: Conditioning, init_seed: u64, path: &Path) -> Result<HeadParams, CheckpointError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let shape = HeadShape::new(u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize)
        .with_conditioning(conditioning);
    let body = &bytes[HEADER_LEN..];
    let expected = shape.param_count() * 8;
    if body.len() != expected {
        return Err(CheckpointError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: body.len(),
        });
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(HeadParams::from_values(shape, values, init_seed).expect("length checked above"))
}

pub fn write_checkpoint(path: &Path, params: &HeadParams, train_config: Option<&TrainConfig>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    write_atomic(path, &encode(params)).map_err(io)?;
    let s = params.shape();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        feature_dim: s.feature_dim,
        h1: s.h1,
        h2: s.h2,
        conditioning: s.conditioning,
        init_seed: params.init_seed(),
        train_config: train_config.cloned(),
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    write_atomic(&sidecar_path(path), json.as_bytes()).map_err(io)
}

/// Read a checkpoint; without a sidecar the head is assumed instruction-conditioned.
pub fn read_checkpoint(path: &Path) -> Result<(HeadParams, Option<CheckpointMeta>), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    let meta = match fs::read_to_string(&side) {
        Ok(text) => Some(
            serde_json::from_str::<CheckpointMeta>(&text).map_err(|e| CheckpointError::Sidecar {
                path: side.clone(),
                message: e.to_string(),
            })?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(source) => return Err(CheckpointError::Io { path: side, source }),
    };
    let (cond, seed) = meta
        .as_ref()
        .map(|m| (m.conditioning, m.init_seed))
        .unwrap_or((Conditioning::Instruction, 0));
    let params = decode(&bytes, cond, seed, path)?;
    if let Some(m) = &meta {
        let s = params.shape();
        if (m.feature_dim, m.h1, m.h2) != (s.feature_dim, s.h1, s.h2) {
            return Err(CheckpointError::Sidecar {
                path: side,
                message: "shape disagrees with binary header".into(),
            });
        }
    }
    Ok((params, meta))
}
