//! Checkpoint container: a directory holding `manifest.json` plus one raw
//! little-endian float32 blob per named tensor, row-major.
//!
//! The same container backs base-model and hypernetwork checkpoints; the
//! `arch` field carries whatever architecture config the owner embeds.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LofaError, Result};
use crate::util::{le_bytes_to_f32s, matrix_to_le_bytes};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    pub endianness: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: named tensors in a fixed order plus an arch blob.
pub struct TensorContainer {
    pub kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

fn blob_file_name(tensor_name: &str) -> String {
    let safe: String = tensor_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

impl TensorContainer {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            let file = blob_file_name(name);
            fs::write(dir.join(&file), matrix_to_le_bytes(m))?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                file,
            });
        }
        let manifest = ContainerManifest {
            version: CONTAINER_VERSION,
            kind: self.kind.clone(),
            dtype: "f32".into(),
            endianness: "little".into(),
            arch: self.arch.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(LofaError::MissingArtifact(format!(
                "{} (no manifest.json)",
                dir.display()
            )));
        }
        let manifest: ContainerManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.dtype != "f32" || manifest.endianness != "little" {
            return Err(LofaError::Format {
                what: "manifest.json".into(),
                detail: format!(
                    "unsupported dtype/endianness {}/{}",
                    manifest.dtype, manifest.endianness
                ),
            });
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let bytes = fs::read(dir.join(&entry.file))?;
            let expected = entry.shape[0] * entry.shape[1];
            let values = le_bytes_to_f32s(&bytes).ok_or_else(|| LofaError::Format {
                what: entry.name.clone(),
                detail: format!("blob length {} is not a multiple of 4", bytes.len()),
            })?;
            if values.len() != expected {
                return Err(LofaError::Format {
                    what: entry.name.clone(),
                    detail: format!("expected {expected} f32 values, found {}", values.len()),
                });
            }
            let m = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                .expect("shape checked above");
            tensors.push((entry.name.clone(), m));
        }
        Ok(Self {
            kind: manifest.kind,
            arch: manifest.arch,
            tensors,
        })
    }

    /// Content hash over tensor names and payload bytes, in manifest order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update(matrix_to_le_bytes(m));
        }
        hex_string(&hasher.finalize())
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| LofaError::Format {
                what: name.into(),
                detail: "tensor missing from container".into(),
            })
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = TensorContainer {
            kind: "test".into(),
            arch: serde_json::json!({"d": 4}),
            tensors: vec![
                ("a/w".into(), array![[1.0f32, -2.5], [3.0, 4.0]]),
                ("a/b".into(), array![[0.25f32, 0.5]]),
            ],
        };
        c.save(dir.path()).unwrap();
        let loaded = TensorContainer::load(dir.path()).unwrap();
        assert_eq!(loaded.kind, "test");
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensors[0].1, c.tensors[0].1);
        assert_eq!(loaded.fingerprint(), c.fingerprint());
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let c = TensorContainer {
            kind: "test".into(),
            arch: serde_json::Value::Null,
            tensors: vec![("weights".into(), array![[1.0f32, 2.0]])],
        };
        c.save(dir.path()).unwrap();
        std::fs::write(dir.path().join("weights.bin"), [0u8; 4]).unwrap();
        let err = TensorContainer::load(dir.path()).unwrap_err();
        match err {
            LofaError::Format { what, .. } => assert_eq!(what, "weights"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
