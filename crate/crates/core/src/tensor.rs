//! Shape-tagged `f32` tensors and the `SYCTNS01` on-disk format.
//!
//! A tensor file is the 8-byte magic `SYCTNS01`, one UTF-8 JSON header line
//! (`{"dims":[..],"dtype":"f32","byte_order":"LE"}` followed by `\n`) and the
//! raw little-endian `f32` payload in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SYCTNS01";

/// Upper bound on the header line, so a corrupt file cannot make us buffer
/// an arbitrary amount of data while looking for the newline.
const MAX_HEADER_LEN: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic, not a SYCTNS01 tensor file")]
    BadMagic { path: PathBuf },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: dims {dims:?} describe {expected} values but payload holds {actual}")]
    DimsMismatch {
        path: PathBuf,
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("dims {dims:?} describe {expected} values but {actual} were given")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dims must be non-empty and strictly positive, got {0:?}")]
    InvalidDims(Vec<usize>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: Vec<usize>,
    dtype: String,
    byte_order: String,
}

/// Row-major `f32` array with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidDims(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Serializes to the `SYCTNS01` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dims: self.dims.clone(),
            dtype: "f32".to_string(),
            byte_order: "LE".to_string(),
        };
        let header = serde_json::to_string(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `SYCTNS01` byte layout. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TensorError> {
        let path_buf = || path.to_path_buf();
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TensorError::BadMagic { path: path_buf() });
        }
        let rest = &bytes[MAGIC.len()..];
        let newline = rest
            .iter()
            .take(MAX_HEADER_LEN)
            .position(|&b| b == b'\n')
            .ok_or_else(|| TensorError::MalformedHeader {
                path: path_buf(),
                reason: "no newline-terminated header line".into(),
            })?;
        let header_text =
            std::str::from_utf8(&rest[..newline]).map_err(|e| TensorError::MalformedHeader {
                path: path_buf(),
                reason: format!("header is not UTF-8: {e}"),
            })?;
        let header: Header =
            serde_json::from_str(header_text).map_err(|e| TensorError::MalformedHeader {
                path: path_buf(),
                reason: e.to_string(),
            })?;
        if header.dtype != "f32" {
            return Err(TensorError::MalformedHeader {
                path: path_buf(),
                reason: format!("unsupported dtype {:?}", header.dtype),
            });
        }
        if header.byte_order != "LE" {
            return Err(TensorError::MalformedHeader {
                path: path_buf(),
                reason: format!("unsupported byte order {:?}", header.byte_order),
            });
        }
        if header.dims.is_empty() || header.dims.contains(&0) {
            return Err(TensorError::MalformedHeader {
                path: path_buf(),
                reason: format!("invalid dims {:?}", header.dims),
            });
        }
        let payload = &rest[newline + 1..];
        let expected = header
            .dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::MalformedHeader {
                path: path_buf(),
                reason: "dims overflow".into(),
            })?;
        if !payload.len().is_multiple_of(4) || payload.len() / 4 != expected {
            return Err(TensorError::DimsMismatch {
                path: path_buf(),
                dims: header.dims,
                expected,
                actual: payload.len() / 4,
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                path: path_buf(),
                index,
            });
        }
        Ok(Self {
            dims: header.dims,
            data,
        })
    }
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io_err = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&t.to_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Tensor::from_bytes(&bytes, path)
}
