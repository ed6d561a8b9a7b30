//! In-process inference over an ONNX file (single `[N, ch, H, W]` image
//! input, single logits or probabilities output), via `tract`.

use std::path::Path;
use std::sync::Arc;

use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use super::{check_dims, to_scores, Backend, BackendError, ClassScores};
use crate::tensor::Tensor as SycTensor;

pub struct OnnxBackend {
    plan: Arc<TypedSimplePlan>,
    dims: [usize; 3],
    num_classes: usize,
    softmax_applied: bool,
}

fn model_err(e: impl std::fmt::Display) -> BackendError {
    BackendError::Model(format!("{e:#}"))
}

/// Concrete dims declared for input 0; `None` entries are symbolic.
fn declared_input_dims(model: &InferenceModel) -> Result<Vec<Option<usize>>, BackendError> {
    let fact = model.input_fact(0).map_err(model_err)?;
    Ok(fact
        .shape
        .dims()
        .map(|d| d.concretize().and_then(|d| d.to_i64().ok()).map(|v| v as usize))
        .collect())
}

impl OnnxBackend {
    /// Loads and optimizes the model for single-image batches.
    ///
    /// A declared input shape that disagrees with `expected_dims` is a
    /// configuration error naming both shapes.
    pub fn load(
        path: &Path,
        expected_dims: Option<[usize; 3]>,
        _batch_size: usize,
        softmax_applied_by_model: bool,
    ) -> Result<Self, BackendError> {
        let model = onnx()
            .model_for_path(path)
            .map_err(|e| BackendError::Config(format!("{}: malformed ONNX model: {e:#}", path.display())))?;
        if model.input_outlets().map_err(model_err)?.len() != 1 {
            return Err(BackendError::Config(format!("{}: expected exactly one input", path.display())));
        }
        let declared = declared_input_dims(&model)?;
        if !declared.is_empty() && declared.len() != 4 {
            return Err(BackendError::Config(format!(
                "{}: input must be [N, ch, H, W], declared rank {}",
                path.display(),
                declared.len()
            )));
        }
        let dims = match (expected_dims, declared.as_slice()) {
            (Some(exp), [_, rest @ ..]) => {
                let mismatch = rest.iter().zip(exp).any(|(d, e)| d.is_some_and(|d| d != e));
                if mismatch {
                    return Err(BackendError::Config(format!(
                        "{}: model input shape {} disagrees with dataset image_dims {exp:?}",
                        path.display(),
                        show_dims(&declared)
                    )));
                }
                exp
            }
            (Some(exp), []) => exp,
            (None, [_, Some(c), Some(h), Some(w)]) => [*c, *h, *w],
            (None, _) => {
                return Err(BackendError::Config(format!(
                    "{}: input shape {} is not fully concrete and no image dims were given",
                    path.display(),
                    show_dims(&declared)
                )))
            }
        };
        let [c, h, w] = dims;
        let typed = model
            .with_input_fact(0, f32::fact([1, c, h, w]).into())
            .and_then(|m| m.into_optimized())
            .map_err(|e| BackendError::Config(format!("{}: {e:#}", path.display())))?;
        let out_fact = typed.output_fact(0).map_err(model_err)?;
        let num_classes = out_fact
            .shape
            .as_concrete()
            .map(|s| s.iter().product::<usize>())
            .ok_or_else(|| BackendError::Config("model output shape is not concrete".into()))?;
        let plan = typed.into_runnable().map_err(model_err)?;
        Ok(Self {
            plan,
            dims,
            num_classes,
            softmax_applied: softmax_applied_by_model,
        })
    }

    fn run_one(&self, img: &SycTensor) -> Result<ClassScores, BackendError> {
        let [c, h, w] = self.dims;
        let input = tract_ndarray::Array4::from_shape_vec((1, c, h, w), img.data().to_vec()).map_err(model_err)?;
        let out = self
            .plan
            .run(tvec!(Tensor::from(input).into()))
            .map_err(model_err)?;
        let view = out[0].to_plain_array_view::<f32>().map_err(model_err)?;
        let raw: Vec<f64> = view.iter().map(|&v| f64::from(v)).collect();
        to_scores(&raw, self.softmax_applied)
    }
}

fn show_dims(d: &[Option<usize>]) -> String {
    let parts: Vec<String> = d
        .iter()
        .map(|v| v.map_or_else(|| "?".to_string(), |v| v.to_string()))
        .collect();
    format!("[{}]", parts.join(", "))
}

impl Backend for OnnxBackend {
    fn input_dims(&self) -> [usize; 3] {
        self.dims
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify(&self, images: &[SycTensor]) -> Vec<Result<ClassScores, BackendError>> {
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                check_dims(self.dims, i, img)?;
                self.run_one(img)
            })
            .collect()
    }
}
