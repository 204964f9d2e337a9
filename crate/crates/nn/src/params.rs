//! Named parameter storage and the single-file checkpoint container.
//!
//! Checkpoint layout:
//!
//! ```text
//! b"HOIMCKP1"            8-byte magic
//! u64 little-endian      manifest length in bytes
//! manifest               UTF-8 JSON (see `Manifest`)
//! blobs                  f64 little-endian values, one blob per parameter
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::matrix::Matrix;

const MAGIC: &[u8; 8] = b"HOIMCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    frozen: bool,
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value, frozen: false });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a copy of `src` under a new name (used for trainable copies).
    pub fn duplicate(&mut self, src: ParamId, name: impl Into<String>) -> ParamId {
        let value = self.entries[src.0].value.clone();
        self.add(name, value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Flattens every parameter in id order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: u64) -> Result<(), NnError> {
        let mut params = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for e in &self.entries {
            params.push(ManifestParam {
                name: e.name.clone(),
                rows: e.value.rows(),
                cols: e.value.cols(),
                offset,
                frozen: e.frozen,
            });
            offset += 8 * e.value.len() as u64;
        }
        let manifest = Manifest { config_hash: config_hash.to_owned(), step, params };
        let json = serde_json::to_vec(&manifest)?;

        let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for e in &self.entries {
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint's manifest without touching the store.
    pub fn read_manifest(path: &Path) -> Result<Manifest, NnError> {
        let (manifest, _) = read_container(path)?;
        Ok(manifest)
    }

    /// Loads parameter values by name. Every parameter in the store must be
    /// present in the checkpoint with a matching shape; frozen flags are kept
    /// as they are in the store.
    pub fn load(&mut self, path: &Path) -> Result<Manifest, NnError> {
        let (manifest, blobs) = read_container(path)?;
        for e in &mut self.entries {
            let p = manifest
                .params
                .iter()
                .find(|p| p.name == e.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {}", e.name)))?;
            if (p.rows, p.cols) != e.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "shape mismatch for {}: checkpoint {}x{}, model {:?}",
                    e.name,
                    p.rows,
                    p.cols,
                    e.value.shape()
                )));
            }
            let start = p.offset as usize;
            let end = start + 8 * p.rows * p.cols;
            let bytes = blobs
                .get(start..end)
                .ok_or_else(|| NnError::Checkpoint(format!("truncated blob for {}", e.name)))?;
            for (dst, chunk) in e.value.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(manifest)
    }
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<u8>), NnError> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(NnError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| NnError::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    Ok((manifest, bytes[16 + len..].to_vec()))
}

/// JSON manifest stored at the head of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<ManifestParam>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub frozen: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_vec(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        store.add("b", Matrix::row_vector(vec![0.1, 0.2, 0.3]));
        store.save(&path, "abc123", 42).unwrap();

        let mut other = store.clone();
        *other.value_mut(a) = Matrix::zeros(2, 2);
        let manifest = other.load(&path).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.config_hash, "abc123");
        assert_eq!(other.flatten(), store.flatten());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(2, 2));
        store.save(&path, "h", 0).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Matrix::zeros(3, 2));
        assert!(matches!(other.load(&path), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(ParamStore::new().load(&path).is_err());
    }
}
