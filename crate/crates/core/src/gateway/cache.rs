//! Content-addressed artifact cache.
//!
//! Reconstructions live under `images/<key>`, features under
//! `features/<key>`. Keys are hex SHA-256 digests of the full request
//! content. Writes go through a temp file and an atomic rename, so readers
//! never observe partial entries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::jsonl::write_atomic;

pub const FEATURE_MAGIC: &[u8; 4] = b"ITIF";
pub const FEATURE_VERSION: u32 = 1;

/// Hash a sequence of fields, length-prefixing each so boundaries are unambiguous.
pub fn content_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ArtifactCache {
    root: PathBuf,
}

impl ArtifactCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, key: &str) -> PathBuf {
        self.root.join("images").join(key)
    }

    pub fn feature_path(&self, key: &str) -> PathBuf {
        self.root.join("features").join(key)
    }

    pub fn get_image(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        read_opt(&self.image_path(key))
    }

    pub fn put_image(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.image_path(key), bytes)
    }

    pub fn get_features(&self, key: &str) -> io::Result<Option<Vec<f32>>> {
        match read_opt(&self.feature_path(key))? {
            None => Ok(None),
            Some(bytes) => decode_features(&bytes).map(Some),
        }
    }

    pub fn put_features(&self, key: &str, values: &[f32]) -> io::Result<()> {
        write_atomic(&self.feature_path(key), &encode_features(values))
    }
}

fn read_opt(path: &Path) -> io::Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// `b"ITIF" | version u32 | d_H u32 | f32 values`, little-endian.
pub fn encode_features(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> io::Result<Vec<f32>> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("feature cache entry: bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad("feature cache entry: unsupported version"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * n {
        return Err(bad("feature cache entry: length mismatch"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
