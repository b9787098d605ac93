//! Tensor archive: a JSON manifest plus a little-endian binary blob in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::array::{numel, Array};
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: Dtype,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Blob path that sits next to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_tensors(
    manifest_path: &Path,
    tensors: &[(String, &Array)],
    metadata: serde_json::Value,
    dtype: Dtype,
) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, a)| a.len() * dtype.width()).sum());
    for (_, a) in tensors {
        for &x in a.data() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        version: ARCHIVE_VERSION,
        dtype,
        blob: blob.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors: tensors.iter().map(|(n, a)| TensorEntry { name: n.clone(), shape: a.shape().to_vec() }).collect(),
        metadata,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&blob, bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_tensors(manifest_path: &Path) -> Result<(Manifest, Vec<(String, Array)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {}", manifest.version)));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob)?;
    let w = manifest.dtype.width();
    let expected: usize = manifest.tensors.iter().map(|t| numel(&t.shape) * w).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!("blob holds {} bytes, manifest expects {expected}", bytes.len())));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut at = 0;
    for t in &manifest.tensors {
        let n = numel(&t.shape);
        let data = bytes[at..at + n * w]
            .chunks_exact(w)
            .map(|c| match manifest.dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            })
            .collect();
        at += n * w;
        out.push((t.name.clone(), Array::new(t.shape.clone(), data)));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let a = Array::new(vec![2, 2], vec![0.1, -1e-300, f64::MAX, 3.0]);
        let b = Array::scalar(std::f64::consts::PI);
        save_tensors(&p, &[("a".into(), &a), ("b".into(), &b)], serde_json::json!({"k": 1}), Dtype::F64).unwrap();
        let (m, t) = load_tensors(&p).unwrap();
        assert_eq!(m.metadata["k"], 1);
        assert_eq!(t[0].0, "a");
        assert!(t[0].1.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(t[1].1.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let a = Array::zeros(&[3]);
        save_tensors(&p, &[("a".into(), &a)], serde_json::Value::Null, Dtype::F32).unwrap();
        std::fs::write(blob_path(&p), [0u8; 5]).unwrap();
        assert!(load_tensors(&p).is_err());
    }
}
