//! Binary weight archive: a JSON manifest followed by one little-endian f32
//! blob and a SHA-256 trailer over everything before it.
//!
//! Layout: `MAGIC | u32 version | u64 manifest length | manifest | blob | sha256`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"S3DWGHT\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// byte offset into the blob
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// model configuration the tensors were built for, if recorded
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug)]
struct Entry {
    tensor: Tensor,
    accessed: AtomicBool,
}

/// Named tensors. Reads through [`WeightArchive::get`] are recorded so
/// callers can check which parameters a forward pass touched.
#[derive(Debug, Default)]
pub struct WeightArchive {
    entries: BTreeMap<String, Entry>,
    pub config: Option<serde_json::Value>,
}

impl Clone for WeightArchive {
    fn clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.clone(),
                            accessed: AtomicBool::new(false),
                        },
                    )
                })
                .collect(),
            config: self.config.clone(),
        }
    }
}

impl PartialEq for WeightArchive {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.tensor == y.tensor)
    }
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Entry {
                tensor,
                accessed: AtomicBool::new(false),
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Look up a tensor without marking it as read.
    pub fn peek(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        e.accessed.store(true, Ordering::Relaxed);
        Ok(&e.tensor)
    }

    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.peek(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn accessed(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.accessed.load(Ordering::Relaxed))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn reset_access(&self) {
        for e in self.entries.values() {
            e.accessed.store(false, Ordering::Relaxed);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut blob = Vec::new();
        for (name, e) in &self.entries {
            if !e.tensor.all_finite() {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: e.tensor.shape().to_vec(),
                offset: blob.len(),
            });
            for v in e.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + manifest.len() + blob.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 12;
        if bytes.len() < header + CHECKSUM_LEN {
            return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored {
            return Err(Error::Checksum {
                expected: hex(stored),
                found: hex(&digest),
            });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = header
            .checked_add(mlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&body[header..blob_start])?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} does not match header",
                manifest.version
            )));
        }
        let blob = &body[blob_start..];
        let mut archive = WeightArchive {
            entries: BTreeMap::new(),
            config: manifest.config,
        };
        for m in manifest.tensors {
            let n: usize = m.shape.iter().product();
            let end = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(m.offset))
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the blob", m.name)))?;
            let data = blob[m.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(m.shape, data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", m.name)))?;
            if archive.entries.contains_key(&m.name) {
                return Err(Error::Format(format!("duplicate tensor `{}`", m.name)));
            }
            archive.insert(m.name, t);
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
