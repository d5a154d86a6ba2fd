//! On-disk tensor archives: a `manifest.json` describing every tensor
//! (shape, dtype, byte offset, SHA-256) next to a `tensors.bin` blob of
//! little-endian floats. Backbone and inversion weights use `f32`;
//! training checkpoints use `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn into_f32(self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v,
            TensorData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        }
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
            TensorData::F64(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Writes `tensors.bin` into `dir` and returns the manifest entries plus the
/// SHA-256 of the whole blob.
pub fn write_blob(dir: &Path, tensors: &[NamedTensor]) -> Result<(Vec<TensorEntry>, String)> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::shape(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let bytes = t.data.to_le_bytes();
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.data.dtype(),
            offset: blob.len() as u64,
            nbytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let blob_sha = hex::encode(Sha256::digest(&blob));
    fs::write(dir.join(BLOB_FILE), &blob)?;
    Ok((entries, blob_sha))
}

/// Reads and verifies every tensor listed in `entries` from `dir/tensors.bin`.
///
/// Size, per-tensor hash and whole-blob hash are all checked; any mismatch is
/// reported as [`Error::Corruption`].
pub fn read_blob(
    dir: &Path,
    entries: &[TensorEntry],
    blob_sha256: &str,
) -> Result<BTreeMap<String, NamedTensor>> {
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::Corruption {
        path: path.clone(),
        detail: format!("cannot read blob: {e}"),
    })?;
    let corrupt = |detail: String| Error::Corruption {
        path: path.clone(),
        detail,
    };
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != blob_sha256 {
        return Err(corrupt(format!(
            "blob sha256 {actual} does not match manifest {blob_sha256}"
        )));
    }
    let mut out = BTreeMap::new();
    for e in entries {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .ok_or_else(|| corrupt(format!("tensor {} has overflowing extent", e.name)))?;
        if end > blob.len() {
            return Err(corrupt(format!(
                "tensor {} extends to byte {end} but blob has {} bytes",
                e.name,
                blob.len()
            )));
        }
        if e.numel() * e.dtype.size() != e.nbytes as usize {
            return Err(corrupt(format!(
                "tensor {} declares {} bytes for shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let bytes = &blob[start..end];
        let sha = hex::encode(Sha256::digest(bytes));
        if sha != e.sha256 {
            return Err(corrupt(format!("tensor {} fails its sha256 check", e.name)));
        }
        let data = match e.dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        out.insert(
            e.name.clone(),
            NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            },
        );
    }
    Ok(out)
}

/// Manifest of a frozen-weight archive (backbone or inversion network).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    /// `clip` or `phi`.
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

pub const WEIGHT_FORMAT: &str = "memefusion-weights";

/// A loaded frozen-weight archive.
#[derive(Debug, Clone)]
pub struct WeightArchive {
    pub dir: PathBuf,
    pub manifest: WeightManifest,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl WeightArchive {
    pub fn write(
        dir: &Path,
        kind: &str,
        meta: serde_json::Value,
        tensors: &[NamedTensor],
    ) -> Result<WeightManifest> {
        let (entries, blob_sha256) = write_blob(dir, tensors)?;
        let manifest = WeightManifest {
            format: WEIGHT_FORMAT.to_string(),
            version: 1,
            kind: kind.to_string(),
            meta,
            tensors: entries,
            blob_sha256,
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    /// Loads and verifies an archive. Failures are [`Error::WeightLoad`].
    pub fn load(dir: &Path, expected_kind: &str) -> Result<Self> {
        let fail = |detail: String| Error::WeightLoad {
            path: dir.to_path_buf(),
            detail,
        };
        let raw = fs::read(dir.join(MANIFEST_FILE))
            .map_err(|e| fail(format!("cannot read {MANIFEST_FILE}: {e}")))?;
        let manifest: WeightManifest = serde_json::from_slice(&raw)
            .map_err(|e| fail(format!("malformed {MANIFEST_FILE}: {e}")))?;
        if manifest.format != WEIGHT_FORMAT {
            return Err(fail(format!("unexpected format {:?}", manifest.format)));
        }
        if manifest.kind != expected_kind {
            return Err(fail(format!(
                "archive kind is {:?}, expected {expected_kind:?}",
                manifest.kind
            )));
        }
        let tensors = read_blob(dir, &manifest.tensors, &manifest.blob_sha256).map_err(|e| match e {
            Error::Corruption { detail, .. } => fail(detail),
            other => other,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            tensors,
        })
    }

    /// Compares the archive against the tensor names and shapes a model
    /// expects and renders any difference as a readable diff.
    pub fn check_expected(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        let mut lines = Vec::new();
        for (name, shape) in expected {
            match self.tensors.get(name) {
                None => lines.push(format!("- {name} {shape:?} (missing)")),
                Some(t) if &t.shape != shape => {
                    lines.push(format!("~ {name}: archive {:?}, expected {shape:?}", t.shape))
                }
                Some(_) => {}
            }
        }
        let wanted: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        for (name, t) in &self.tensors {
            if !wanted.contains(name.as_str()) {
                lines.push(format!("+ {name} {:?} (unexpected)", t.shape));
            }
        }
        if lines.is_empty() {
            Ok(())
        } else {
            Err(Error::WeightLoad {
                path: self.dir.clone(),
                detail: format!("manifest diff:\n{}", lines.join("\n")),
            })
        }
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape.as_slice())
    }

    pub fn f32(&self, name: &str) -> Result<Vec<f32>> {
        self.tensors
            .get(name)
            .map(|t| t.data.clone().into_f32())
            .ok_or_else(|| Error::WeightLoad {
                path: self.dir.clone(),
                detail: format!("manifest diff:\n- {name} (missing)"),
            })
    }

    pub fn f64(&self, name: &str) -> Result<Vec<f64>> {
        self.f32(name)
            .map(|v| v.into_iter().map(f64::from).collect())
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.manifest.meta.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.manifest.meta.get(key).and_then(|v| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: TensorData::F32(vec![1.0, 2.0, 3.0, 4.0]),
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![3],
                data: TensorData::F32(vec![-1.0, 0.5, 9.0]),
            },
        ]
    }

    #[test]
    fn roundtrip_and_diff() {
        let dir = tempfile::tempdir().unwrap();
        WeightArchive::write(dir.path(), "phi", serde_json::json!({"x": 1}), &sample()).unwrap();
        let ar = WeightArchive::load(dir.path(), "phi").unwrap();
        assert_eq!(ar.f32("b").unwrap(), vec![-1.0, 0.5, 9.0]);
        assert_eq!(ar.meta_usize("x"), Some(1));
        ar.check_expected(&[("a".into(), vec![2, 2]), ("b".into(), vec![3])])
            .unwrap();
        let err = ar
            .check_expected(&[("a".into(), vec![4]), ("c".into(), vec![1])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("~ a"), "{err}");
        assert!(err.contains("- c"), "{err}");
        assert!(err.contains("+ b"), "{err}");
    }

    #[test]
    fn truncated_blob_is_a_weight_load_error() {
        let dir = tempfile::tempdir().unwrap();
        WeightArchive::write(dir.path(), "phi", serde_json::Value::Null, &sample()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            WeightArchive::load(dir.path(), "phi"),
            Err(Error::WeightLoad { .. })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        WeightArchive::write(dir.path(), "phi", serde_json::Value::Null, &sample()).unwrap();
        assert!(WeightArchive::load(dir.path(), "clip").is_err());
    }
}
