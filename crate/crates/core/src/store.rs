//! On-disk array archives.
//!
//! An archive is a directory holding a `manifest.json` and one raw
//! little-endian file per named array. The manifest records dtype, shape,
//! byte order and a SHA-256 digest for every array, plus a free-form `meta`
//! object owned by the caller. Datasets and checkpoints both use it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    Int32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 | DType::Int32 => 4,
            DType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_order: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub struct ArchiveWriter {
    dir: PathBuf,
    kind: String,
    arrays: Vec<ArrayEntry>,
}

fn file_name(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}.bin")
}

impl ArchiveWriter {
    pub fn create(dir: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            kind: kind.to_string(),
            arrays: Vec::new(),
        })
    }

    fn put_bytes(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel * dtype.size() != bytes.len() {
            return Err(Error::shape(format!(
                "array {name}: shape {shape:?} does not match {} bytes",
                bytes.len()
            )));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::config(format!("duplicate array name {name}")));
        }
        let file = file_name(name);
        fs::write(self.dir.join(&file), &bytes)?;
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            file,
            dtype,
            shape: shape.to_vec(),
            byte_order: "little".to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.put_bytes(name, DType::Float32, shape, bytes)
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.put_bytes(name, DType::Float64, shape, bytes)
    }

    pub fn put_i32(&mut self, name: &str, shape: &[usize], data: &[i32]) -> Result<()> {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.put_bytes(name, DType::Int32, shape, bytes)
    }

    pub fn finish(self, meta: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            meta,
            arrays: self.arrays,
        };
        fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

#[derive(Debug)]
pub struct Archive {
    dir: PathBuf,
    manifest: Manifest,
}

impl Archive {
    pub fn open(dir: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if manifest.kind != kind {
            return Err(Error::Malformed {
                path,
                reason: format!("archive kind {:?}, expected {kind:?}", manifest.kind),
            });
        }
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.manifest.meta
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.arrays.iter().any(|a| a.name == name)
    }

    fn read(&self, name: &str, dtype: DType) -> Result<(Vec<usize>, Vec<u8>)> {
        let entry = self
            .manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Malformed {
                path: self.dir.join(MANIFEST_FILE),
                reason: format!("missing array {name}"),
            })?;
        let path = self.dir.join(&entry.file);
        if entry.dtype != dtype {
            return Err(Error::Malformed {
                path,
                reason: format!("dtype {:?}, expected {dtype:?}", entry.dtype),
            });
        }
        if entry.byte_order != "little" {
            return Err(Error::Malformed {
                path,
                reason: format!("unsupported byte order {}", entry.byte_order),
            });
        }
        let bytes = fs::read(&path)?;
        let expected = (entry.shape.iter().product::<usize>() * dtype.size()) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path,
                expected,
                found: bytes.len() as u64,
            });
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checksum { path });
        }
        Ok((entry.shape.clone(), bytes))
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (shape, bytes) = self.read(name, DType::Float32)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, bytes) = self.read(name, DType::Float64)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }

    pub fn i32(&self, name: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let (shape, bytes) = self.read(name, DType::Int32)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) {
        let mut w = ArchiveWriter::create(dir, "test").unwrap();
        w.put_f32("x", &[2, 2], &[1.0, -2.5, f32::MIN_POSITIVE, 3.0]).unwrap();
        w.put_i32("ids", &[3], &[0, 7, -1]).unwrap();
        w.finish(serde_json::json!({"seed": 9})).unwrap();
    }

    #[test]
    fn round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        sample(tmp.path());
        let a = Archive::open(tmp.path(), "test").unwrap();
        assert_eq!(a.f32("x").unwrap(), (vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0]));
        assert_eq!(a.i32("ids").unwrap().1, vec![0, 7, -1]);
        assert_eq!(a.meta()["seed"], 9);
    }

    #[test]
    fn distinct_errors() {
        let tmp = tempfile::tempdir().unwrap();
        sample(tmp.path());

        // flip one byte: same length, bad digest
        let p = tmp.path().join("x.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        let a = Archive::open(tmp.path(), "test").unwrap();
        assert!(matches!(a.f32("x"), Err(Error::Checksum { .. })));

        fs::write(&p, &bytes[..5]).unwrap();
        assert!(matches!(a.f32("x"), Err(Error::Truncated { expected: 16, found: 5, .. })));

        assert!(matches!(a.i32("x"), Err(Error::Malformed { .. })));

        let mpath = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(matches!(
            Archive::open(tmp.path(), "test"),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }
}
