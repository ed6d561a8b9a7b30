//! The five saliency metrics: Average Drop %, grid Deletion / Insertion,
//! m_GT and SCH.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::dataset::{Dataset, ImageRecord};
use crate::expr::{ExprError, WeightSource};
use crate::saliency::{build_saliency, perturb, rank_cells, upsample_bilinear, CapabilityError, Direction, SaliencyMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricKind {
    AvgDrop,
    /// Number of perturbation steps; `None` means `min(10, w*h)`.
    Deletion(Option<usize>),
    Insertion(Option<usize>),
    MGt,
    Sch,
}

pub const DEFAULT_STEPS: usize = 10;

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::AvgDrop)
    }

    /// The kinds evaluated for a fixed step count, in report order.
    pub fn all(steps: Option<usize>) -> [MetricKind; 5] {
        [
            MetricKind::AvgDrop,
            MetricKind::Deletion(steps),
            MetricKind::Insertion(steps),
            MetricKind::MGt,
            MetricKind::Sch,
        ]
    }

    pub fn needs_backend(self) -> bool {
        matches!(self, MetricKind::AvgDrop | MetricKind::Deletion(_) | MetricKind::Insertion(_))
    }

    /// Record fields this metric reads, beyond the terminals.
    pub fn required_fields(self) -> &'static [&'static str] {
        match self {
            MetricKind::AvgDrop => &["image"],
            MetricKind::Deletion(_) | MetricKind::Insertion(_) => &["image", "blurred_image"],
            MetricKind::MGt | MetricKind::Sch => &["gt_mask"],
        }
    }

    /// Step count for a `w`x`h` grid.
    pub fn steps(self, cells: usize) -> usize {
        match self {
            MetricKind::Deletion(p) | MetricKind::Insertion(p) => p.unwrap_or(DEFAULT_STEPS.min(cells)),
            _ => 0,
        }
    }

    /// Maps a value into the higher-is-better orientation used by the search.
    pub fn orient(self, value: f64) -> f64 {
        if self.higher_is_better() {
            value
        } else {
            -value
        }
    }

    /// Largest attainable oriented per-image score, when one exists.
    pub fn oriented_upper_bound(self) -> f64 {
        match self {
            MetricKind::AvgDrop => 0.0,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::AvgDrop => "avgdrop",
            MetricKind::Deletion(_) => "deletion",
            MetricKind::Insertion(_) => "insertion",
            MetricKind::MGt => "mgt",
            MetricKind::Sch => "sch",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Deletion(Some(p)) | MetricKind::Insertion(Some(p)) => write!(f, "{}:{p}", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, steps) = match lower.split_once(':') {
            Some((n, p)) => {
                let p: usize = p.parse().map_err(|_| format!("bad step count in metric `{s}`"))?;
                if p == 0 {
                    return Err(format!("step count must be >= 1 in metric `{s}`"));
                }
                (n.to_string(), Some(p))
            }
            None => (lower, None),
        };
        let kind = match name.as_str() {
            "avgdrop" | "avg_drop" | "average_drop" => MetricKind::AvgDrop,
            "deletion" => MetricKind::Deletion(steps),
            "insertion" => MetricKind::Insertion(steps),
            "mgt" | "m_gt" => MetricKind::MGt,
            "sch" => MetricKind::Sch,
            _ => return Err(format!("unknown metric `{s}`")),
        };
        if steps.is_some() && !matches!(kind, MetricKind::Deletion(_) | MetricKind::Insertion(_)) {
            return Err(format!("metric `{name}` takes no step count"));
        }
        Ok(kind)
    }
}

impl TryFrom<String> for MetricKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MetricKind> for String {
    fn from(m: MetricKind) -> String {
        m.to_string()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Capability(#[from] CapabilityError),
    #[error("metric {0} needs a classifier backend")]
    NoBackend(MetricKind),
    #[error("steps P={steps} must lie in 1..={cells} for a {cells}-cell grid")]
    BadSteps { steps: usize, cells: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("record {record}: {source}")]
    Backend { record: String, source: BackendError },
    #[error("record {0}: gt_mask has no foreground pixels")]
    EmptyMask(String),
}

/// One image's metric value plus an optional note (for example the
/// zero-confidence case of Average Drop).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageValue {
    pub value: f64,
    pub flag: Option<String>,
}

impl ImageValue {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricScore {
    pub metric: MetricKind,
    /// Mean over the images that did not fail; NaN when all failed.
    pub value: f64,
    pub per_image: Vec<(String, f64)>,
    pub failures: Vec<(String, String)>,
    pub flags: Vec<(String, String)>,
    pub higher_is_better: bool,
}

/// Fails fast when some record lacks a field the metric reads, or the
/// metric needs a backend and none is given.
pub fn check_capabilities(kind: MetricKind, ds: &Dataset, backend: Option<&dyn Backend>) -> Result<(), MetricError> {
    if kind.needs_backend() && backend.is_none() {
        return Err(MetricError::NoBackend(kind));
    }
    let (_, w, h) = (ds.grid[0], ds.grid[1], ds.grid[2]);
    if let MetricKind::Deletion(Some(p)) | MetricKind::Insertion(Some(p)) = kind {
        if p == 0 || p > w * h {
            return Err(MetricError::BadSteps { steps: p, cells: w * h });
        }
    }
    for rec in &ds.records {
        for &field in kind.required_fields() {
            let present = match field {
                "image" => rec.image.is_some(),
                "blurred_image" => rec.blurred_image.is_some(),
                _ => rec.gt_mask.is_some(),
            };
            if !present {
                return Err(CapabilityError::Missing {
                    record: rec.image_id.clone(),
                    field,
                    needed_by: kind.name(),
                }
                .into());
            }
        }
    }
    Ok(())
}

fn need<'a>(rec: &'a ImageRecord, t: &'a Option<Tensor>, field: &'static str, kind: MetricKind) -> Result<&'a Tensor, MetricError> {
    t.as_ref().ok_or_else(|| {
        CapabilityError::Missing {
            record: rec.image_id.clone(),
            field,
            needed_by: kind.name(),
        }
        .into()
    })
}

fn classify_all(backend: &dyn Backend, rec: &ImageRecord, images: &[Tensor], class: usize) -> Result<Vec<f64>, MetricError> {
    backend
        .classify(images)
        .into_iter()
        .map(|r| {
            r.map(|s| s.score(class)).map_err(|source| MetricError::Backend {
                record: rec.image_id.clone(),
                source,
            })
        })
        .collect()
}

/// Normalized map upsampled to the `H`x`W` pixel grid.
pub fn upsampled_heatmap(map: &SaliencyMap, rows: usize, cols: usize) -> Vec<f64> {
    upsample_bilinear(&map.normalized, map.w, map.h, rows, cols)
}

/// Per-image value of `kind` for the CAM weights produced by `src`.
pub fn image_value(
    kind: MetricKind,
    src: &dyn WeightSource,
    rec: &ImageRecord,
    backend: Option<&dyn Backend>,
) -> Result<ImageValue, MetricError> {
    let wv = src.weights(rec)?;
    let map = build_saliency(&wv, rec);
    let class = rec.predicted_class;
    match kind {
        MetricKind::Deletion(_) | MetricKind::Insertion(_) => {
            let backend = backend.ok_or(MetricError::NoBackend(kind))?;
            let cells = map.w * map.h;
            let steps = kind.steps(cells);
            if steps == 0 || steps > cells {
                return Err(MetricError::BadSteps { steps, cells });
            }
            let direction = if matches!(kind, MetricKind::Deletion(_)) {
                Direction::Delete
            } else {
                Direction::Insert
            };
            let ranking = rank_cells(&map);
            let images = (0..=steps)
                .map(|j| perturb(rec, &ranking, j, direction))
                .collect::<Result<Vec<_>, _>>()?;
            let scores = classify_all(backend, rec, &images, class)?;
            let base = scores[0];
            let total: f64 = match direction {
                Direction::Delete => scores.iter().map(|s| base - s).sum(),
                Direction::Insert => scores.iter().map(|s| s - base).sum(),
            };
            Ok(ImageValue::plain(total / (steps + 1) as f64))
        }
        MetricKind::AvgDrop => {
            let backend = backend.ok_or(MetricError::NoBackend(kind))?;
            let image = need(rec, &rec.image, "image", kind)?;
            let d = image.dims();
            let heat = upsampled_heatmap(&map, d[1], d[2]);
            let plane = d[1] * d[2];
            let masked: Vec<f64> = image
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f64::from(v) * heat[i % plane])
                .collect();
            let masked = Tensor::from_f64(d.to_vec(), &masked).expect("image dims");
            let scores = classify_all(backend, rec, &[image.clone(), masked], class)?;
            let (y, hy) = (scores[0], scores[1]);
            if y == 0.0 {
                return Ok(ImageValue {
                    value: 0.0,
                    flag: Some("zero confidence on the original image".into()),
                });
            }
            Ok(ImageValue::plain((y - hy).max(0.0) / y * 100.0))
        }
        MetricKind::MGt => {
            let mask = need(rec, &rec.gt_mask, "gt_mask", kind)?;
            let d = mask.dims();
            let heat = upsampled_heatmap(&map, d[0], d[1]);
            let m = mask.data();
            let p = m.iter().filter(|&&v| v > 0.5).count();
            if p == 0 {
                return Err(MetricError::EmptyMask(rec.image_id.clone()));
            }
            let mut order: Vec<usize> = (0..heat.len()).collect();
            order.sort_by(|&a, &b| heat[b].total_cmp(&heat[a]));
            let n = order[..p].iter().filter(|&&i| m[i] > 0.5).count();
            Ok(ImageValue::plain(n as f64 / p as f64))
        }
        MetricKind::Sch => {
            let mask = need(rec, &rec.gt_mask, "gt_mask", kind)?;
            let d = mask.dims();
            let heat = upsampled_heatmap(&map, d[0], d[1]);
            let total: f64 = heat.iter().sum();
            if total == 0.0 {
                return Ok(ImageValue::plain(0.0));
            }
            let inside: f64 = heat.iter().zip(mask.data()).map(|(h, &m)| h * f64::from(m)).sum();
            Ok(ImageValue::plain(inside / total))
        }
    }
}

/// Evaluates `kind` over every record of `ds`, spreading images over up to
/// `workers` threads. Per-image failures are collected, not propagated.
pub fn evaluate_metric(
    kind: MetricKind,
    src: &dyn WeightSource,
    ds: &Dataset,
    backend: Option<&dyn Backend>,
    workers: usize,
) -> Result<MetricScore, MetricError> {
    check_capabilities(kind, ds, backend)?;
    let n = ds.records.len();
    let workers = workers.clamp(1, n.max(1));
    let mut results: Vec<Option<Result<ImageValue, MetricError>>> = vec![None; n];
    if workers == 1 {
        for (slot, rec) in results.iter_mut().zip(&ds.records) {
            *slot = Some(image_value(kind, src, rec, backend));
        }
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            for (slots, recs) in results.chunks_mut(chunk).zip(ds.records.chunks(chunk)) {
                s.spawn(move || {
                    for (slot, rec) in slots.iter_mut().zip(recs) {
                        *slot = Some(image_value(kind, src, rec, backend));
                    }
                });
            }
        });
    }
    let mut score = MetricScore {
        metric: kind,
        value: f64::NAN,
        per_image: Vec::with_capacity(n),
        failures: Vec::new(),
        flags: Vec::new(),
        higher_is_better: kind.higher_is_better(),
    };
    for (rec, r) in ds.records.iter().zip(results) {
        match r.expect("filled") {
            Ok(v) => {
                if let Some(flag) = v.flag {
                    score.flags.push((rec.image_id.clone(), flag));
                }
                score.per_image.push((rec.image_id.clone(), v.value));
            }
            Err(e) => score.failures.push((rec.image_id.clone(), e.to_string())),
        }
    }
    if !score.per_image.is_empty() {
        score.value = mean(score.per_image.iter().map(|(_, v)| *v));
    }
    Ok(score)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::StubModel;
    use crate::dataset::test_support::record;
    use crate::expr::{Expr, TerminalKind};

    fn g() -> Expr {
        Expr::terminal(TerminalKind::Grads)
    }

    #[test]
    fn parse_and_print() {
        assert_eq!("mgt".parse::<MetricKind>().unwrap(), MetricKind::MGt);
        assert_eq!("deletion:9".parse::<MetricKind>().unwrap(), MetricKind::Deletion(Some(9)));
        assert_eq!("Insertion".parse::<MetricKind>().unwrap(), MetricKind::Insertion(None));
        assert_eq!(MetricKind::Deletion(Some(4)).to_string(), "deletion:4");
        assert!("deletion:0".parse::<MetricKind>().is_err());
        assert!("sch:3".parse::<MetricKind>().is_err());
        assert!("aopc".parse::<MetricKind>().is_err());
        let json = serde_json::to_string(&MetricKind::AvgDrop).unwrap();
        assert_eq!(json, "\"avgdrop\"");
    }

    /// 1-channel 4x4 image over a 2x2 grid, stub weight = 1 on class 0.
    fn pixel_setup(image: Vec<f32>, blurred: Vec<f32>, maps: Vec<f32>, grads: Vec<f32>) -> (ImageRecord, StubModel) {
        let mut w = vec![1.0f32; 16];
        w.extend(vec![0.0f32; 16]);
        let model = StubModel::new(Tensor::new(vec![2, 1, 4, 4], w).unwrap(), 4.0, None).unwrap();
        let k = grads.len();
        let mut r = record("r0", k, 2, 2, [0.6, 0.4]);
        r.feature_maps = Tensor::new(vec![k, 2, 2], maps).unwrap();
        r.grads = Tensor::new(vec![k], grads).unwrap();
        r.image = Some(Tensor::new(vec![1, 4, 4], image).unwrap());
        r.blurred_image = Some(Tensor::new(vec![1, 4, 4], blurred).unwrap());
        (r, model)
    }

    #[test]
    fn deletion_is_zero_when_blur_is_identity() {
        let img: Vec<f32> = (0..16).map(|v| v as f32 / 16.0).collect();
        let (r, m) = pixel_setup(img.clone(), img, vec![1.0, 0.5, 0.25, 0.0], vec![1.0]);
        let v = image_value(MetricKind::Deletion(Some(4)), &g(), &r, Some(&m)).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn deletion_and_insertion_match_hand_rolled_sum() {
        let img = vec![1.0f32; 16];
        let blur = vec![0.0f32; 16];
        // Single channel map ranks cells (0,1) > (1,0) > (0,0) > (1,1).
        let (r, m) = pixel_setup(img, blur, vec![0.5, 1.0, 0.75, 0.0], vec![1.0]);
        let y = |ones: f64| {
            // logits [ones / 4, 0]
            let l = ones / 4.0;
            1.0 / (1.0 + (-l).exp())
        };
        // Predicted class is 0 (0.6 vs 0.4 in the stored scores).
        let d = image_value(MetricKind::Deletion(Some(2)), &g(), &r, Some(&m)).unwrap().value;
        let want = ((y(16.0) - y(16.0)) + (y(16.0) - y(12.0)) + (y(16.0) - y(8.0))) / 3.0;
        assert!((d - want).abs() < 1e-7, "{d} vs {want}");
        let i = image_value(MetricKind::Insertion(Some(2)), &g(), &r, Some(&m)).unwrap().value;
        let want = ((y(0.0) - y(0.0)) + (y(4.0) - y(0.0)) + (y(8.0) - y(0.0))) / 3.0;
        assert!((i - want).abs() < 1e-7, "{i} vs {want}");
    }

    #[test]
    fn avg_drop_cases() {
        let img: Vec<f32> = (0..16).map(|v| 0.5 + v as f32 / 32.0).collect();
        // Constant positive map normalizes to zeros: the masked image is 0.
        let (r, m) = pixel_setup(img.clone(), img.clone(), vec![1.0; 4], vec![1.0]);
        let v = image_value(MetricKind::AvgDrop, &g(), &r, Some(&m)).unwrap().value;
        let y = m.probs(&img)[0] as f32 as f64;
        let y0 = m.probs(&[0.0; 16])[0] as f32 as f64;
        assert!((v - (y - y0).max(0.0) / y * 100.0).abs() < 1e-9);
    }

    #[test]
    fn mgt_two_of_three() {
        // 3x3 map upsampled to 3x3 is the identity.
        let mut r = record("r", 1, 3, 3, [0.6, 0.4]);
        r.feature_maps = Tensor::new(vec![1, 3, 3], vec![9.0, 8.0, 7.0, 1.0, 2.0, 3.0, 0.0, 0.0, 6.0]).unwrap();
        r.grads = Tensor::new(vec![1], vec![1.0]).unwrap();
        // Top 3 pixels are 0, 1, 2 (values 9, 8, 7); mask has 0, 2 and 8.
        let mask = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        r.gt_mask = Some(Tensor::new(vec![3, 3], mask).unwrap());
        let v = image_value(MetricKind::MGt, &g(), &r, None).unwrap().value;
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        r.gt_mask = Some(Tensor::zeros(vec![3, 3]).unwrap());
        assert!(matches!(image_value(MetricKind::MGt, &g(), &r, None), Err(MetricError::EmptyMask(_))));
    }

    #[test]
    fn sch_uniform_and_inside() {
        let mut r = record("r", 1, 2, 2, [0.6, 0.4]);
        r.grads = Tensor::new(vec![1], vec![1.0]).unwrap();
        r.gt_mask = Some(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        // Map [[1,1],[0,0]] lies inside the mask.
        r.feature_maps = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(image_value(MetricKind::Sch, &g(), &r, None).unwrap().value, 1.0);
        // All-zero map gives 0.
        r.feature_maps = Tensor::zeros(vec![1, 2, 2]).unwrap();
        assert_eq!(image_value(MetricKind::Sch, &g(), &r, None).unwrap().value, 0.0);
    }

    #[test]
    fn capabilities_fail_fast() {
        let r = record("r7", 1, 2, 2, [0.6, 0.4]);
        let ds = Dataset::from_records(vec!["a".into(), "b".into()], vec![r], None).unwrap();
        let err = evaluate_metric(MetricKind::MGt, &g(), &ds, None, 1).unwrap_err();
        assert!(err.to_string().contains("gt_mask"), "{err}");
        assert!(err.to_string().contains("r7"));
        let err = evaluate_metric(MetricKind::Deletion(None), &g(), &ds, None, 1).unwrap_err();
        assert_eq!(err, MetricError::NoBackend(MetricKind::Deletion(None)));
    }

    #[test]
    fn orientation() {
        assert_eq!(MetricKind::AvgDrop.orient(12.5), -12.5);
        assert_eq!(MetricKind::MGt.orient(0.25), 0.25);
        assert_eq!(MetricKind::Deletion(None).steps(9), 9);
        assert_eq!(MetricKind::Insertion(None).steps(16), 10);
    }
}
