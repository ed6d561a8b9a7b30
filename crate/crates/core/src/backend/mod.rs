//! Image classifiers behind one interface: a deterministic stub, an ONNX
//! model file and a remote inference server.

mod onnx;
mod remote;
mod stub;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use onnx::OnnxBackend;
pub use remote::{decode_payload, encode_payload, ClassifyRequest, ClassifyResponse, MetaResponse, RemoteBackend};
pub use stub::{StubModel, StubSpecFile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("image {index}: dims {actual:?} do not match backend input dims {expected:?}")]
    DimMismatch {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("model produced a non-finite output")]
    NonFinite,
    #[error("model: {0}")]
    Model(String),
}

/// Probabilities over all classes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub probs: Vec<f32>,
}

impl ClassScores {
    pub fn score(&self, class: usize) -> f64 {
        f64::from(self.probs[class])
    }
}

/// Numerically stable softmax computed in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Turns raw model outputs into probabilities, checking finiteness.
pub(crate) fn to_scores(raw: &[f64], softmax_applied: bool) -> Result<ClassScores, BackendError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(BackendError::NonFinite);
    }
    let probs = if softmax_applied { raw.to_vec() } else { softmax(raw) };
    Ok(ClassScores {
        probs: probs.into_iter().map(|v| v as f32).collect(),
    })
}

/// A classifier `[ch, H, W]` images -> class probabilities.
///
/// Implementations accept concurrent calls. Output order matches input
/// order and every input gets exactly one entry; failures are per index.
pub trait Backend: Send + Sync {
    /// Expected `[ch, H, W]`.
    fn input_dims(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn classify(&self, images: &[Tensor]) -> Vec<Result<ClassScores, BackendError>>;
}

pub(crate) fn check_dims(expected: [usize; 3], index: usize, img: &Tensor) -> Result<(), BackendError> {
    if img.dims() != expected {
        return Err(BackendError::DimMismatch {
            index,
            expected: expected.to_vec(),
            actual: img.dims().to_vec(),
        });
    }
    Ok(())
}

fn default_batch() -> usize {
    16
}

fn default_timeout() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Onnx {
        path: PathBuf,
    },
    Remote {
        base_url: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
    Stub {
        spec_path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub softmax_applied_by_model: bool,
}

impl BackendConfig {
    pub fn stub(spec_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Stub {
                spec_path: spec_path.into(),
            },
            batch_size: default_batch(),
            softmax_applied_by_model: false,
        }
    }
}

/// Opens the configured backend. When `expected_dims` is given (the
/// dataset's `[ch, H, W]`), a disagreeing backend is a configuration error.
pub fn load_backend(cfg: &BackendConfig, expected_dims: Option<[usize; 3]>) -> Result<Arc<dyn Backend>, BackendError> {
    if cfg.batch_size == 0 {
        return Err(BackendError::Config("batch_size must be >= 1".into()));
    }
    let backend: Arc<dyn Backend> = match &cfg.kind {
        BackendKind::Stub { spec_path } => Arc::new(StubModel::load(spec_path)?),
        BackendKind::Remote {
            base_url,
            timeout_ms,
            max_retries,
        } => Arc::new(RemoteBackend::connect(
            base_url,
            *timeout_ms,
            *max_retries,
            cfg.batch_size,
            cfg.softmax_applied_by_model,
        )?),
        BackendKind::Onnx { path } => Arc::new(OnnxBackend::load(
            path,
            expected_dims,
            cfg.batch_size,
            cfg.softmax_applied_by_model,
        )?),
    };
    if let Some(dims) = expected_dims {
        if backend.input_dims() != dims {
            return Err(BackendError::Config(format!(
                "backend expects input dims {:?} but the dataset has image_dims {:?}",
                backend.input_dims(),
                dims
            )));
        }
    }
    Ok(backend)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[0.0, f64::ln(3.0)]);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_output_rejected() {
        assert_eq!(to_scores(&[f64::NAN, 0.0], false), Err(BackendError::NonFinite));
        let s = to_scores(&[0.2, 0.8], true).unwrap();
        assert_eq!(s.probs, vec![0.2, 0.8]);
    }

    #[test]
    fn config_json_shapes() {
        let cfg: BackendConfig =
            serde_json::from_str(r#"{"kind":"remote","base_url":"http://x:1","batch_size":4}"#).unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(
            cfg.kind,
            BackendKind::Remote {
                base_url: "http://x:1".into(),
                timeout_ms: 30_000,
                max_retries: 3
            }
        );
        let cfg: BackendConfig = serde_json::from_str(r#"{"kind":"stub","spec_path":"s.json"}"#).unwrap();
        assert_eq!(cfg, BackendConfig::stub("s.json"));
    }
}
