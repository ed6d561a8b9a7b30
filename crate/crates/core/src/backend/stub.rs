use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_dims, softmax, Backend, BackendError, ClassScores};
use crate::tensor::{load_tensor, save_tensor, Tensor};

/// JSON side of a stub spec; tensors live next to it as `SYCTNS01` files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StubSpecFile {
    pub format_version: u32,
    pub num_classes: usize,
    /// `[ch, H, W]`
    pub dims: [usize; 3],
    pub temperature: f64,
    /// `[C, ch, H, W]` per-class weight maps.
    pub weights: String,
    /// `[K, ch, H, W]` per-channel textures used by the synthetic generator
    /// to compose images from feature maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_textures: Option<String>,
}

/// Linear-softmax classifier: `logit_c = sum(W_c * img) / temperature`.
#[derive(Debug, Clone)]
pub struct StubModel {
    dims: [usize; 3],
    temperature: f64,
    /// `[C][ch*H*W]`, widened once.
    weights: Vec<Vec<f64>>,
    weights_tensor: Tensor,
    textures: Option<Tensor>,
}

impl StubModel {
    pub fn new(weights: Tensor, temperature: f64, textures: Option<Tensor>) -> Result<Self, BackendError> {
        let d = weights.dims();
        if d.len() != 4 {
            return Err(BackendError::Config(format!("stub weights must be [C, ch, H, W], got {d:?}")));
        }
        if d[0] < 2 {
            return Err(BackendError::Config("stub model needs at least two classes".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(BackendError::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let dims = [d[1], d[2], d[3]];
        if let Some(t) = &textures {
            if t.dims().len() != 4 || t.dims()[1..] != dims {
                return Err(BackendError::Config(format!(
                    "feature textures must be [K, {}, {}, {}], got {:?}",
                    dims[0],
                    dims[1],
                    dims[2],
                    t.dims()
                )));
            }
        }
        let plane = dims.iter().product::<usize>();
        let widened = weights.to_f64();
        Ok(Self {
            dims,
            temperature,
            weights: widened.chunks(plane).map(<[f64]>::to_vec).collect(),
            weights_tensor: weights,
            textures,
        })
    }

    pub fn load(spec_path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let spec_path = spec_path.as_ref();
        let text = fs::read_to_string(spec_path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", spec_path.display())))?;
        let spec: StubSpecFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", spec_path.display())))?;
        let dir = spec_path.parent().unwrap_or_else(|| Path::new("."));
        let weights = load_tensor(dir.join(&spec.weights)).map_err(|e| BackendError::Config(e.to_string()))?;
        let textures = spec
            .feature_textures
            .as_ref()
            .map(|p| load_tensor(dir.join(p)))
            .transpose()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let model = Self::new(weights, spec.temperature, textures)?;
        if model.num_classes() != spec.num_classes || model.dims != spec.dims {
            return Err(BackendError::Config(format!(
                "{}: declared {} classes / dims {:?} but weights are {:?}",
                spec_path.display(),
                spec.num_classes,
                spec.dims,
                model.weights_tensor.dims()
            )));
        }
        Ok(model)
    }

    /// Writes `spec.json`, `weights.syct` and (if present) `textures.syct`
    /// into `dir`; returns the spec path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, BackendError> {
        let err = |e: String| BackendError::Config(e);
        fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        save_tensor(&self.weights_tensor, dir.join("weights.syct")).map_err(|e| err(e.to_string()))?;
        if let Some(t) = &self.textures {
            save_tensor(t, dir.join("textures.syct")).map_err(|e| err(e.to_string()))?;
        }
        let spec = StubSpecFile {
            format_version: 1,
            num_classes: self.num_classes(),
            dims: self.dims,
            temperature: self.temperature,
            weights: "weights.syct".into(),
            feature_textures: self.textures.as_ref().map(|_| "textures.syct".into()),
        };
        let path = dir.join("spec.json");
        fs::write(&path, serde_json::to_string_pretty(&spec).expect("spec") + "\n").map_err(|e| err(e.to_string()))?;
        Ok(path)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights_tensor
    }

    pub fn textures(&self) -> Option<&Tensor> {
        self.textures.as_ref()
    }

    pub fn logits(&self, image: &[f32]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| {
                let dot: f64 = w.iter().zip(image).map(|(a, &b)| a * f64::from(b)).sum();
                dot / self.temperature
            })
            .collect()
    }

    /// Probabilities in `f64`, before the `f32` narrowing of [`Backend::classify`].
    pub fn probs(&self, image: &[f32]) -> Vec<f64> {
        softmax(&self.logits(image))
    }
}

impl Backend for StubModel {
    fn input_dims(&self) -> [usize; 3] {
        self.dims
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn classify(&self, images: &[Tensor]) -> Vec<Result<ClassScores, BackendError>> {
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                check_dims(self.dims, i, img)?;
                Ok(ClassScores {
                    probs: self.probs(img.data()).into_iter().map(|v| v as f32).collect(),
                })
            })
            .collect()
    }
}
