//! Named-array archives: a safetensors file (`{name}.safetensors`) holding
//! every tensor, plus a JSON manifest (`{name}.manifest.json`) that lists
//! each array's dtype, shape and content hash together with free-form
//! metadata. Loading cross-checks the two files in both directions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{read_json, write_json};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Little-endian bytes of the tensor in its own dtype. Half types are
/// widened to f32 first, which is lossless.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
    })
}

pub fn tensor_sha256(t: &Tensor) -> Result<String> {
    Ok(hex::encode(Sha256::digest(tensor_bytes(t)?)))
}

pub fn dtype_name(dtype: DType) -> &'static str {
    dtype.as_str()
}

pub fn archive_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.safetensors"))
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.json"))
}

pub fn exists(dir: &Path, name: &str) -> bool {
    archive_path(dir, name).is_file() && manifest_path(dir, name).is_file()
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(arrays: BTreeMap<String, Tensor>) -> Self {
        Self {
            arrays,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn metadata_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| ck(format!("metadata key `{key}` missing")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn manifest(&self, name: &str) -> Result<Manifest> {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, t)| {
                Ok(ArrayEntry {
                    name: k.clone(),
                    dtype: dtype_name(t.dtype()).to_string(),
                    shape: t.dims().to_vec(),
                    sha256: tensor_sha256(t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            name: name.to_string(),
            arrays,
            metadata: self.metadata.clone(),
        })
    }

    /// Writes both files and returns the manifest.
    pub fn save(&self, dir: &Path, name: &str) -> Result<Manifest> {
        if self.arrays.is_empty() {
            return Err(ck(format!("refusing to write empty checkpoint `{name}`")));
        }
        fs::create_dir_all(dir)?;
        let manifest = self.manifest(name)?;
        let contiguous = self
            .arrays
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<std::collections::HashMap<_, _>>>()?;
        candle_core::safetensors::save(&contiguous, archive_path(dir, name))?;
        write_json(&manifest, &manifest_path(dir, name))?;
        Ok(manifest)
    }

    /// Loads and verifies names, dtypes, shapes and hashes.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let mpath = manifest_path(dir, name);
        let apath = archive_path(dir, name);
        if !mpath.is_file() || !apath.is_file() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint `{name}` not found in {}",
                dir.display()
            )));
        }
        let manifest: Manifest = read_json(&mpath)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck(format!("unsupported format version {}", manifest.format_version)));
        }
        let loaded = candle_core::safetensors::load(&apath, &Device::Cpu)?;
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            let t = loaded
                .get(&entry.name)
                .ok_or_else(|| ck(format!("`{}` listed in manifest but absent from archive", entry.name)))?;
            if dtype_name(t.dtype()) != entry.dtype || t.dims() != entry.shape.as_slice() {
                return Err(ck(format!(
                    "`{}`: archive has {} {:?}, manifest says {} {:?}",
                    entry.name,
                    dtype_name(t.dtype()),
                    t.dims(),
                    entry.dtype,
                    entry.shape
                )));
            }
            if tensor_sha256(t)? != entry.sha256 {
                return Err(ck(format!("`{}`: content hash mismatch", entry.name)));
            }
            arrays.insert(entry.name.clone(), t.clone());
        }
        if let Some(extra) = loaded.keys().find(|k| !arrays.contains_key(*k)) {
            return Err(ck(format!("`{extra}` present in archive but not in manifest")));
        }
        Ok(Self {
            arrays,
            metadata: manifest.metadata,
        })
    }

    /// Arrays whose names start with `prefix`, prefix kept.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
