//! `DPEC1` named-tensor container.
//!
//! Layout: the 5 magic bytes `DPEC1`, an 8-byte little-endian manifest
//! length, the UTF-8 JSON manifest, then every array's little-endian payload
//! back to back in manifest order. Offsets in the manifest are relative to
//! the first payload byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DPEC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerArray {
    pub dtype: ElementType,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: ElementType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    provenance: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
}

/// Named tensors plus a provenance string and free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub provenance: String,
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ContainerArray>,
}

impl Container {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            provenance: provenance.into(),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: ElementType, tensor: Tensor) {
        self.arrays.insert(name.into(), ContainerArray { dtype, tensor });
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.insert(name, ElementType::F32, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .map(|a| &a.tensor)
            .ok_or_else(|| Error::InvalidInput(format!("container has no array {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for (name, arr) in &self.arrays {
            if !arr.tensor.all_finite() {
                return Err(Error::InvalidInput(format!("array {name:?} has non-finite values")));
            }
            let offset = payload.len() as u64;
            match arr.dtype {
                ElementType::F32 => {
                    for &v in arr.tensor.data() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                ElementType::F64 => {
                    for &v in arr.tensor.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: arr.dtype,
                shape: arr.tensor.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            provenance: self.provenance.clone(),
            metadata: self.metadata.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("missing DPEC1 magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(Error::Corruption("truncated header length".into()));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if header_len > rest.len() {
            return Err(Error::Corruption(format!(
                "manifest length {header_len} exceeds file size"
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let payload = &rest[header_len..];

        let mut arrays = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in manifest.arrays {
            let count: usize = entry.shape.iter().product();
            let declared = (count * entry.dtype.size()) as u64;
            if declared != entry.nbytes {
                return Err(Error::Corruption(format!(
                    "array {:?}: shape {:?} needs {declared} bytes, manifest says {}",
                    entry.name, entry.shape, entry.nbytes
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Corruption(format!(
                    "array {:?} starts at {} but the previous array ended at {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let end = entry.offset + entry.nbytes;
            if end > payload.len() as u64 {
                return Err(Error::Corruption(format!(
                    "array {:?} needs bytes up to {end}, payload has {}",
                    entry.name,
                    payload.len()
                )));
            }
            let raw = &payload[entry.offset as usize..end as usize];
            let data: Vec<f64> = match entry.dtype {
                ElementType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                ElementType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::from_vec(&entry.shape, data)?;
            let arr = ContainerArray {
                dtype: entry.dtype,
                tensor,
            };
            if arrays.insert(entry.name.clone(), arr).is_some() {
                return Err(Error::Format(format!("duplicate array name {:?}", entry.name)));
            }
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Corruption(format!(
                "payload has {} bytes but the manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            provenance: manifest.provenance,
            metadata: manifest.metadata,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write a map of named tensors as 32-bit floats.
pub fn save_container(arrays: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("dpseg");
    for (name, t) in arrays {
        c.insert_f32(name.clone(), t.clone());
    }
    c.save(path)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(Container::load(path)?
        .arrays
        .into_iter()
        .map(|(k, v)| (k, v.tensor))
        .collect())
}
