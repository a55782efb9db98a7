//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `MODITCKP`                        |
//! | 8      | 4    | format version (1)                      |
//! | 12     | 8    | manifest length `m` in bytes            |
//! | 20     | m    | UTF-8 manifest                          |
//! | 20 + m | p    | tensor payload                          |
//! | end−32 | 32   | SHA-256 of every preceding byte         |
//!
//! The manifest is line based: `dtype = f32|f64`, `meta.<key> = <value>`,
//! `config.<key> = <value>` (a full config snapshot), and one
//! `tensor <name> <rows> <cols> <offset>` line per tensor, with offsets
//! relative to the payload start. Tensors are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use modit_core::numeric::{Matrix, Real};
use modit_core::params::ParamTree;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

pub const MAGIC: &[u8; 8] = b"MODITCKP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic or header)")]
    BadHeader,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint hash mismatch; file is corrupt")]
    HashMismatch,
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("checkpoint stores {found} values but {expected} was requested")]
    Dtype { found: String, expected: String },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found}, model expects {expected}")]
    ShapeMismatch { name: String, found: String, expected: String },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint incompatible with config: {0}")]
    Incompatible(String),
}


#[derive(Debug, Clone, PartialEq)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// In-memory checkpoint of one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: String,
    pub meta: BTreeMap<String, String>,
    pub config: RunConfig,
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn new<F: Real>(config: RunConfig) -> Self {
        Self {
            dtype: F::NAME.to_string(),
            meta: BTreeMap::new(),
            config,
            tensors: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn check_dtype<F: Real>(&self) -> Result<(), CheckpointError> {
        if self.dtype == F::NAME {
            Ok(())
        } else {
            Err(CheckpointError::Dtype {
                found: self.dtype.clone(),
                expected: F::NAME.to_string(),
            })
        }
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn put<F: Real>(&mut self, name: &str, m: &Matrix<F>) {
        assert_eq!(self.dtype, F::NAME, "checkpoint precision fixed at creation");
        assert!(!name.contains(char::is_whitespace), "tensor names carry no whitespace");
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset: self.payload.len(),
        });
        for &v in m.as_slice() {
            v.write_le(&mut self.payload);
        }
    }

    pub fn get<F: Real>(&self, name: &str) -> Result<Matrix<F>, CheckpointError> {
        self.check_dtype::<F>()?;
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let bytes = &self.payload[t.offset..t.offset + t.rows * t.cols * F::BYTES];
        let data = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
        Matrix::from_vec(t.rows, t.cols, data).map_err(|e| CheckpointError::Manifest(e.to_string()))
    }

    /// Stores every tensor of `tree` under `prefix/`.
    pub fn put_tree<F: Real, P: ParamTree<F>>(&mut self, prefix: &str, tree: &P) {
        for (name, m) in tree.named() {
            self.put(&format!("{prefix}/{name}"), m);
        }
    }

    /// Overwrites every tensor of `tree` from `prefix/`, checking shapes.
    pub fn load_tree<F: Real, P: ParamTree<F>>(&self, prefix: &str, tree: &mut P) -> Result<(), CheckpointError> {
        for (name, slot) in tree.named_mut() {
            let full = format!("{prefix}/{name}");
            let m = self.get::<F>(&full)?;
            if m.shape() != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    found: format!("{}x{}", m.rows(), m.cols()),
                    expected: format!("{}x{}", slot.rows(), slot.cols()),
                });
            }
            *slot = m;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("dtype = {}\n", self.dtype);
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta.{k} = {v}\n"));
        }
        for (k, v) in self.config.entries() {
            manifest.push_str(&format!("config.{k} = {v}\n"));
        }
        for t in &self.tensors {
            manifest.push_str(&format!("tensor {} {} {} {}\n", t.name, t.rows, t.cols, t.offset));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + self.payload.len() + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&self.payload);
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN + HASH_LEN || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadHeader);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(CheckpointError::HashMismatch);
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&e| e <= body.len())
            .ok_or(CheckpointError::BadHeader)?;
        let manifest = std::str::from_utf8(&body[HEADER_LEN..manifest_end])
            .map_err(|_| CheckpointError::Manifest("not UTF-8".into()))?;
        let payload = body[manifest_end..].to_vec();

        let mut dtype = None;
        let mut meta = BTreeMap::new();
        let mut config_text = String::new();
        let mut tensors = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let num = |s: &str| s.parse::<usize>().map_err(|_| CheckpointError::Manifest(line.to_string()));
                if f.len() != 4 {
                    return Err(CheckpointError::Manifest(line.to_string()));
                }
                tensors.push(TensorEntry {
                    name: f[0].to_string(),
                    rows: num(f[1])?,
                    cols: num(f[2])?,
                    offset: num(f[3])?,
                });
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| CheckpointError::Manifest(line.to_string()))?;
            if k == "dtype" {
                dtype = Some(v.to_string());
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else if let Some(key) = k.strip_prefix("config.") {
                config_text.push_str(&format!("{key} = {v}\n"));
            } else {
                return Err(CheckpointError::Manifest(line.to_string()));
            }
        }
        let dtype = dtype.ok_or_else(|| CheckpointError::Manifest("missing dtype".into()))?;
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(CheckpointError::Manifest(format!("unknown dtype {other}"))),
        };
        for t in &tensors {
            let end = t.rows.checked_mul(t.cols).and_then(|n| n.checked_mul(width)).and_then(|n| n.checked_add(t.offset));
            if end.is_none_or(|e| e > payload.len()) {
                return Err(CheckpointError::Manifest(format!("tensor {} exceeds payload", t.name)));
            }
        }
        Ok(Self {
            dtype,
            meta,
            config: config_text.parse()?,
            tensors,
            payload,
        })
    }

    /// Writes to a temporary file next to `path`, then renames over it.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new::<f32>(RunConfig::default());
        c.meta.insert("step".into(), "7".into());
        c.put("a/w", &Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f32 * 0.1 - 0.2));
        c.put("a/b", &Matrix::row_vector(&[f32::MIN_POSITIVE, -0.0, 1e30]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let w: Matrix<f32> = back.get("a/w").unwrap();
        let orig: Matrix<f32> = c.get("a/w").unwrap();
        assert!(w.as_slice().iter().zip(orig.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::HashMismatch)));
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadHeader)));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn precision_and_names_are_checked() {
        let c = sample();
        assert!(matches!(c.get::<f64>("a/w"), Err(CheckpointError::Dtype { .. })));
        assert!(matches!(c.get::<f32>("nope"), Err(CheckpointError::MissingTensor(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Read { .. })));
    }
}
