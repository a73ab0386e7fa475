//! On-disk archives: single networks and full training checkpoints.
//!
//! Archives are JSON documents. Tensors are stored as base64 of their
//! little-endian bytes so reloading is bit-exact.

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Network, NetworkRecord};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: &str = "ifqa-ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 4],
    pub dtype: String,
    pub data: String,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        TensorRecord {
            shape: t.shape(),
            dtype: T::NAME.to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Load {
            path: Default::default(),
            reason: format!("bad tensor payload: {e}"),
        })?;
        let values: Vec<T> = match self.dtype.as_str() {
            "f32" => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            "f64" => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            other => {
                return Err(Error::Load {
                    path: Default::default(),
                    reason: format!("unknown dtype `{other}`"),
                })
            }
        };
        Tensor::from_vec(self.shape, values)
    }
}

/// Standalone network file, e.g. pretrained feature-extractor weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkArchive {
    pub format_version: String,
    pub network: NetworkRecord,
}

pub fn write_network_archive<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    let archive = NetworkArchive {
        format_version: FORMAT_VERSION.to_string(),
        network: net.to_record(),
    };
    write_json_atomic(path, &archive)
}

pub fn read_network_archive(path: &Path) -> Result<NetworkArchive> {
    let archive: NetworkArchive = read_json(path)?;
    check_version(path, &archive.format_version)?;
    Ok(archive)
}

pub(crate) fn check_version(path: &Path, found: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("format version `{found}`, expected `{FORMAT_VERSION}`"),
        });
    }
    Ok(())
}

pub(crate) fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn write_json_atomic<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    write_atomic(path, &bytes)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failure never leaves a truncated `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
