//! Per-image records, the dataset manifest and the on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one directory per record.
//! Each record directory holds `record.json` and one `SYCTNS01` file per
//! tensor field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{load_tensor, save_tensor, Tensor, TensorError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const RECORD_FILE: &str = "record.json";
const PROB_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest format_version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("record {record}: field `{field}`: {reason}")]
    Invalid {
        record: String,
        field: &'static str,
        reason: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl DatasetError {
    fn invalid(record: &str, field: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            record: record.to_string(),
            field,
            reason: reason.into(),
        }
    }
}

/// One image with its precomputed terminals and optional metric inputs.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub true_class: Option<usize>,
    /// Softmax probabilities of the original image, `[|C|]`.
    pub class_scores: Tensor,
    /// Argmax of `class_scores`, ties to the lowest index.
    pub predicted_class: usize,
    /// `[K, w, h]`
    pub feature_maps: Tensor,
    /// Pooled gradients of the predicted-class score, `[K]`.
    pub grads: Tensor,
    /// Score of the image masked by each normalized upsampled map, `[K]`.
    pub cic_scores: Tensor,
    /// Relative score drop when each channel is zeroed, `[K]`.
    pub abl_scores: Tensor,
    /// `[ch, H, W]`
    pub image: Option<Tensor>,
    /// `[ch, H, W]`
    pub blurred_image: Option<Tensor>,
    /// `[H, W]`, values in {0, 1}.
    pub gt_mask: Option<Tensor>,
}

impl ImageRecord {
    /// Builds a record and checks every invariant, naming the offending field.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        true_class: Option<usize>,
        class_scores: Tensor,
        feature_maps: Tensor,
        grads: Tensor,
        cic_scores: Tensor,
        abl_scores: Tensor,
        image: Option<Tensor>,
        blurred_image: Option<Tensor>,
        gt_mask: Option<Tensor>,
    ) -> Result<Self, DatasetError> {
        let image_id = image_id.into();
        let predicted_class = argmax(class_scores.data());
        let rec = Self {
            image_id,
            true_class,
            class_scores,
            predicted_class,
            feature_maps,
            grads,
            cic_scores,
            abl_scores,
            image,
            blurred_image,
            gt_mask,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn num_channels(&self) -> usize {
        self.feature_maps.dims()[0]
    }

    /// Feature-map grid as `(w, h)`.
    pub fn grid(&self) -> (usize, usize) {
        let d = self.feature_maps.dims();
        (d[1], d[2])
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let id = self.image_id.as_str();
        let scores = self.class_scores.data();
        if self.class_scores.dims().len() != 1 || scores.len() < 2 {
            return Err(DatasetError::invalid(
                id,
                "class_scores",
                format!("expected a vector of >= 2 classes, got dims {:?}", self.class_scores.dims()),
            ));
        }
        if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::invalid(id, "class_scores", format!("entry {v} outside [0, 1]")));
        }
        let sum: f64 = scores.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(DatasetError::invalid(id, "class_scores", format!("sums to {sum}, expected 1")));
        }
        if let Some(c) = self.true_class {
            if c >= scores.len() {
                return Err(DatasetError::invalid(id, "true_class", format!("{c} out of range")));
            }
        }
        let fm = self.feature_maps.dims();
        if fm.len() != 3 {
            return Err(DatasetError::invalid(id, "feature_maps", format!("expected [K, w, h], got {fm:?}")));
        }
        let k = fm[0];
        for (field, t) in [
            ("grads", &self.grads),
            ("cic_scores", &self.cic_scores),
            ("abl_scores", &self.abl_scores),
        ] {
            if t.dims() != [k] {
                return Err(DatasetError::invalid(
                    id,
                    field,
                    format!("expected dims [{k}] to match feature_maps, got {:?}", t.dims()),
                ));
            }
        }
        for (field, t) in [
            ("class_scores", Some(&self.class_scores)),
            ("feature_maps", Some(&self.feature_maps)),
            ("grads", Some(&self.grads)),
            ("cic_scores", Some(&self.cic_scores)),
            ("abl_scores", Some(&self.abl_scores)),
            ("image", self.image.as_ref()),
            ("blurred_image", self.blurred_image.as_ref()),
            ("gt_mask", self.gt_mask.as_ref()),
        ] {
            if let Some(i) = t.and_then(Tensor::first_non_finite) {
                return Err(DatasetError::invalid(id, field, format!("non-finite value at index {i}")));
            }
        }
        if let Some(img) = &self.image {
            if img.dims().len() != 3 {
                return Err(DatasetError::invalid(id, "image", format!("expected [ch, H, W], got {:?}", img.dims())));
            }
        }
        if let Some(blur) = &self.blurred_image {
            match &self.image {
                Some(img) if img.dims() != blur.dims() => {
                    return Err(DatasetError::invalid(
                        id,
                        "blurred_image",
                        format!("dims {:?} differ from image dims {:?}", blur.dims(), img.dims()),
                    ))
                }
                None if blur.dims().len() != 3 => {
                    return Err(DatasetError::invalid(id, "blurred_image", "expected [ch, H, W]"))
                }
                _ => {}
            }
        }
        if let Some(mask) = &self.gt_mask {
            if mask.dims().len() != 2 {
                return Err(DatasetError::invalid(id, "gt_mask", format!("expected [H, W], got {:?}", mask.dims())));
            }
            if let Some(img) = &self.image {
                if mask.dims() != &img.dims()[1..] {
                    return Err(DatasetError::invalid(
                        id,
                        "gt_mask",
                        format!("dims {:?} differ from image spatial dims {:?}", mask.dims(), &img.dims()[1..]),
                    ));
                }
            }
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(DatasetError::invalid(id, "gt_mask", "values must be 0 or 1"));
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordEntry {
    pub image_id: String,
    /// Record directory, relative to the manifest.
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub classes: Vec<String>,
    /// `[K, w, h]`
    pub grid: [usize; 3],
    /// `[ch, H, W]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dims: Option<[usize; 3]>,
    pub records: Vec<RecordEntry>,
    /// Stub model spec that produced the class scores, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub_model: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordFile {
    image_id: String,
    #[serde(default)]
    true_class: Option<usize>,
}

/// An immutable, validated collection of records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub grid: [usize; 3],
    pub image_dims: Option<[usize; 3]>,
    pub records: Vec<ImageRecord>,
    /// Absolute path of the stub spec, when the manifest names one.
    pub stub_model: Option<PathBuf>,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Checks cross-record consistency and collects warnings.
    pub fn from_records(
        classes: Vec<String>,
        records: Vec<ImageRecord>,
        stub_model: Option<PathBuf>,
    ) -> Result<Self, DatasetError> {
        let first = records
            .first()
            .ok_or_else(|| DatasetError::Manifest("dataset has no records".into()))?;
        let grid = {
            let d = first.feature_maps.dims();
            [d[0], d[1], d[2]]
        };
        let image_dims = first.image.as_ref().map(|t| {
            let d = t.dims();
            [d[0], d[1], d[2]]
        });
        let mut warnings = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for rec in &records {
            rec.validate()?;
            if !seen.insert(rec.image_id.as_str()) {
                return Err(DatasetError::invalid(&rec.image_id, "image_id", "duplicate id"));
            }
            if rec.feature_maps.dims() != grid {
                return Err(DatasetError::invalid(
                    &rec.image_id,
                    "feature_maps",
                    format!("dims {:?} inconsistent with dataset grid {grid:?}", rec.feature_maps.dims()),
                ));
            }
            if rec.num_classes() != classes.len() {
                return Err(DatasetError::invalid(
                    &rec.image_id,
                    "class_scores",
                    format!("{} classes, manifest lists {}", rec.num_classes(), classes.len()),
                ));
            }
            let dims = rec.image.as_ref().map(|t| [t.dims()[0], t.dims()[1], t.dims()[2]]);
            if let (Some(a), Some(b)) = (dims, image_dims) {
                if a != b {
                    return Err(DatasetError::invalid(
                        &rec.image_id,
                        "image",
                        format!("dims {a:?} inconsistent with dataset image dims {b:?}"),
                    ));
                }
            }
            if rec.image.is_some() && rec.blurred_image.is_none() {
                warnings.push(format!("record {}: image without blurred_image", rec.image_id));
            }
            if let Some(mask) = &rec.gt_mask {
                if mask.data().iter().all(|&v| v == 0.0) {
                    warnings.push(format!("record {}: gt_mask is empty", rec.image_id));
                }
            }
        }
        Ok(Self {
            classes,
            grid,
            image_dims,
            records,
            stub_model,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// A new dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            grid: self.grid,
            image_dims: self.image_dims,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            stub_model: self.stub_model.clone(),
            warnings: Vec::new(),
        }
    }

    pub fn find(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Class label used for stratification: the true class when known,
    /// otherwise the model's prediction.
    pub fn stratum(&self, index: usize) -> usize {
        let r = &self.records[index];
        r.true_class.unwrap_or(r.predicted_class)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_optional(dir: &Path, name: &str) -> Result<Option<Tensor>, DatasetError> {
    let path = dir.join(name);
    if path.exists() {
        Ok(Some(load_tensor(&path)?))
    } else {
        Ok(None)
    }
}

fn load_record(dir: &Path, entry: &RecordEntry) -> Result<ImageRecord, DatasetError> {
    let meta: RecordFile = read_json(&dir.join(RECORD_FILE))?;
    if meta.image_id != entry.image_id {
        return Err(DatasetError::invalid(
            &entry.image_id,
            "image_id",
            format!("record.json says {:?}", meta.image_id),
        ));
    }
    let required = |name: &str| -> Result<Tensor, DatasetError> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(DatasetError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing record file"),
            });
        }
        Ok(load_tensor(&path)?)
    };
    ImageRecord::new(
        meta.image_id,
        meta.true_class,
        required("class_scores.syct")?,
        required("feature_maps.syct")?,
        required("grads.syct")?,
        required("cic_scores.syct")?,
        required("abl_scores.syct")?,
        load_optional(dir, "image.syct")?,
        load_optional(dir, "blurred_image.syct")?,
        load_optional(dir, "gt_mask.syct")?,
    )
}

/// Loads and validates every record named by the manifest.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let manifest_path = manifest_path.as_ref();
    let manifest: DatasetManifest = read_json(manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(manifest.format_version));
    }
    if manifest.classes.len() < 2 {
        return Err(DatasetError::Manifest("at least two classes are required".into()));
    }
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let rec = load_record(&root.join(&entry.path), entry)?;
        if rec.feature_maps.dims() != manifest.grid {
            return Err(DatasetError::invalid(
                &rec.image_id,
                "feature_maps",
                format!("dims {:?} disagree with manifest grid {:?}", rec.feature_maps.dims(), manifest.grid),
            ));
        }
        if let (Some(img), Some(dims)) = (&rec.image, manifest.image_dims) {
            if img.dims() != dims {
                return Err(DatasetError::invalid(
                    &rec.image_id,
                    "image",
                    format!("dims {:?} disagree with manifest image_dims {dims:?}", img.dims()),
                ));
            }
        }
        records.push(rec);
    }
    let stub = manifest.stub_model.as_ref().map(|p| root.join(p));
    let mut ds = Dataset::from_records(manifest.classes, records, stub)?;
    if ds.image_dims.is_none() {
        ds.image_dims = manifest.image_dims;
    }
    Ok(ds)
}

/// Writes `ds` under `dir` and returns the manifest path.
///
/// `stub_model` is stored verbatim as the manifest's relative stub path.
pub fn write_dataset(ds: &Dataset, dir: &Path, stub_model: Option<&str>) -> Result<PathBuf, DatasetError> {
    let io = |path: &Path, source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for rec in &ds.records {
        let rel = format!("records/{}", rec.image_id);
        let rdir = dir.join(&rel);
        fs::create_dir_all(&rdir).map_err(|e| io(&rdir, e))?;
        write_json(
            &rdir.join(RECORD_FILE),
            &RecordFile {
                image_id: rec.image_id.clone(),
                true_class: rec.true_class,
            },
        )?;
        save_tensor(&rec.class_scores, rdir.join("class_scores.syct"))?;
        save_tensor(&rec.feature_maps, rdir.join("feature_maps.syct"))?;
        save_tensor(&rec.grads, rdir.join("grads.syct"))?;
        save_tensor(&rec.cic_scores, rdir.join("cic_scores.syct"))?;
        save_tensor(&rec.abl_scores, rdir.join("abl_scores.syct"))?;
        for (name, t) in [
            ("image.syct", &rec.image),
            ("blurred_image.syct", &rec.blurred_image),
            ("gt_mask.syct", &rec.gt_mask),
        ] {
            if let Some(t) = t {
                save_tensor(t, rdir.join(name))?;
            }
        }
        entries.push(RecordEntry {
            image_id: rec.image_id.clone(),
            path: rel,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        classes: ds.classes.clone(),
        grid: ds.grid,
        image_dims: ds.image_dims,
        records: entries,
        stub_model: stub_model.map(str::to_string),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Minimal valid record with `k` channels on a `w`x`h` grid.
    pub fn record(id: &str, k: usize, w: usize, h: usize, scores: [f32; 2]) -> ImageRecord {
        let t = |dims: Vec<usize>, f: &dyn Fn(usize) -> f32| {
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(f).collect()).unwrap()
        };
        ImageRecord::new(
            id,
            None,
            Tensor::new(vec![2], scores.to_vec()).unwrap(),
            t(vec![k, w, h], &|i| (i % 7) as f32 * 0.1),
            t(vec![k], &|i| i as f32 - 1.0),
            t(vec![k], &|i| 0.5 + i as f32),
            t(vec![k], &|i| 0.1 * i as f32),
            None,
            None,
            None,
        )
        .unwrap()
    }
}
