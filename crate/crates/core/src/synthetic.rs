//! Deterministic synthetic datasets whose terminals are computed from a
//! stub model, plus "planted" variants with a known best terminal per class.
//!
//! Each image is composed from its own feature maps:
//! `img = (1/K) * sum_k Up(A_k) * t_k`, where `t_k` is a fixed per-channel
//! texture. That makes every terminal a closed-form function of the stored
//! feature maps and the stub weights.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{Backend, BackendError, StubModel};
use crate::dataset::{write_dataset, Dataset, DatasetError, ImageRecord};
use crate::expr::{eval_weights, Expr, TerminalKind};
use crate::metrics::upsampled_heatmap;
use crate::saliency::{build_saliency, cell_span, default_blur, upsample_bilinear};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub n_classes: usize,
    pub images_per_class: usize,
    /// Feature channels `K`.
    pub k: usize,
    /// Grid rows.
    pub w: usize,
    /// Grid columns.
    pub h: usize,
    pub ch: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let all = [
            ("n_classes", self.n_classes),
            ("images_per_class", self.images_per_class),
            ("k", self.k),
            ("w", self.w),
            ("h", self.h),
            ("ch", self.ch),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::InvalidParams(format!("{name} must be >= 1")));
        }
        if self.n_classes < 2 {
            return Err(SynthError::InvalidParams("n_classes must be >= 2".into()));
        }
        if !self.height.is_multiple_of(self.w) || !self.width.is_multiple_of(self.h) {
            return Err(SynthError::InvalidParams(format!(
                "image {}x{} is not divisible by grid {}x{}",
                self.height, self.width, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// A generated dataset together with the model that labels it.
pub struct Synthetic {
    pub dataset: Dataset,
    pub model: StubModel,
}

/// `(1/K) * sum_k Up(A_k) * t_k` in `f64`, narrowed to `f32`.
///
/// `maps` is `[K, w, h]`, `textures` `[K, ch, H, W]`.
pub fn compose_image(maps: &Tensor, textures: &Tensor) -> Tensor {
    let md = maps.dims();
    let (k, w, h) = (md[0], md[1], md[2]);
    let td = textures.dims();
    let (ch, rows, cols) = (td[1], td[2], td[3]);
    let plane = rows * cols;
    let a = maps.to_f64();
    let t = textures.data();
    let mut out = vec![0.0f64; ch * plane];
    for c in 0..k {
        let up = upsample_bilinear(&a[c * w * h..(c + 1) * w * h], w, h, rows, cols);
        let tex = &t[c * ch * plane..(c + 1) * ch * plane];
        for (i, o) in out.iter_mut().enumerate() {
            *o += up[i % plane] * f64::from(tex[i]);
        }
    }
    out.iter_mut().for_each(|v| *v /= k as f64);
    Tensor::from_f64(vec![ch, rows, cols], &out).expect("image dims")
}

/// Spatially pooled gradient of the stub's class-`class` probability with
/// respect to each feature map.
///
/// Bilinear weights sum to one at every output pixel, so averaging
/// `d img / d A_k(i,j)` over the grid leaves `t_k / (K * w * h)`.
pub fn pooled_gradients(model: &StubModel, image: &Tensor, textures: &Tensor, class: usize, w: usize, h: usize) -> Vec<f64> {
    let probs = model.probs(image.data());
    let weights = model.weights().to_f64();
    let n = image.len();
    let tau = model.temperature();
    let mut dy = vec![0.0f64; n];
    for (d, pd) in probs.iter().enumerate() {
        let coef = probs[class] * (if d == class { 1.0 } else { 0.0 } - pd) / tau;
        for (g, wv) in dy.iter_mut().zip(&weights[d * n..(d + 1) * n]) {
            *g += coef * wv;
        }
    }
    let k = textures.dims()[0];
    let t = textures.data();
    (0..k)
        .map(|c| {
            let s: f64 = dy.iter().zip(&t[c * n..(c + 1) * n]).map(|(g, &tv)| g * f64::from(tv)).sum();
            s / (k * w * h) as f64
        })
        .collect()
}

/// Per-map min-max of `Up(A_k)`; constant maps become all zeros.
fn minmax(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// `Y^class(img * s(Up(A_k)))` for every channel.
pub fn cic_scores(model: &StubModel, image: &Tensor, maps: &Tensor, class: usize) -> Vec<f64> {
    let md = maps.dims();
    let (k, w, h) = (md[0], md[1], md[2]);
    let d = image.dims();
    let plane = d[1] * d[2];
    let a = maps.to_f64();
    (0..k)
        .map(|c| {
            let s = minmax(&upsample_bilinear(&a[c * w * h..(c + 1) * w * h], w, h, d[1], d[2]));
            let masked: Vec<f64> = image
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f64::from(v) * s[i % plane])
                .collect();
            let masked = Tensor::from_f64(d.to_vec(), &masked).expect("dims");
            model.probs(masked.data())[class]
        })
        .collect()
}

/// `(y - y_k) / y` where `y_k` re-scores the image composed with `A_k = 0`.
pub fn ablation_scores(model: &StubModel, image: &Tensor, maps: &Tensor, textures: &Tensor, class: usize) -> Vec<f64> {
    let y = model.probs(image.data())[class];
    let k = maps.dims()[0];
    let plane = maps.len() / k;
    (0..k)
        .map(|c| {
            let mut ablated = maps.clone();
            ablated.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
            let img = compose_image(&ablated, textures);
            let yk = model.probs(img.data())[class];
            (y - yk) / y
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Builds the dataset and its stub model in memory.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<Synthetic, SynthError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.ch * p.height * p.width;
    let signatures: Vec<Vec<f32>> = (0..p.n_classes).map(|_| uniform(&mut rng, n, 0.0, 1.0)).collect();
    let mut weights = Vec::with_capacity(p.n_classes * n);
    for sig in &signatures {
        for (i, &v) in sig.iter().enumerate() {
            let mean = signatures.iter().map(|s| f64::from(s[i])).sum::<f64>() / p.n_classes as f64;
            weights.push((f64::from(v) - mean) as f32);
        }
    }
    let textures: Vec<f32> = (0..p.k).flat_map(|c| signatures[c % p.n_classes].clone()).collect();
    let textures = Tensor::new(vec![p.k, p.ch, p.height, p.width], textures).expect("dims");
    let weights = Tensor::new(vec![p.n_classes, p.ch, p.height, p.width], weights).expect("dims");
    let temperature = n as f64 / 500.0;
    let model = StubModel::new(weights, temperature, Some(textures.clone()))?;

    let mut records = Vec::with_capacity(p.n_classes * p.images_per_class);
    for class in 0..p.n_classes {
        for _ in 0..p.images_per_class {
            let id = format!("img{:04}", records.len());
            let rows = rng.gen_range(1..=p.w.div_ceil(2));
            let cols = rng.gen_range(1..=p.h.div_ceil(2));
            let r0 = rng.gen_range(0..=p.w - rows);
            let c0 = rng.gen_range(0..=p.h - cols);
            let mut maps = uniform(&mut rng, p.k * p.w * p.h, 0.0, 0.3);
            for c in (0..p.k).filter(|c| c % p.n_classes == class) {
                for r in r0..r0 + rows {
                    for q in c0..c0 + cols {
                        maps[(c * p.w + r) * p.h + q] += 0.7;
                    }
                }
            }
            let maps = Tensor::new(vec![p.k, p.w, p.h], maps).expect("dims");
            let image = compose_image(&maps, &textures);
            let probs: Vec<f32> = model.probs(image.data()).iter().map(|&v| v as f32).collect();
            let class_scores = Tensor::new(vec![p.n_classes], probs).expect("dims");
            let predicted = crate::dataset::argmax(class_scores.data());
            let grads = pooled_gradients(&model, &image, &textures, predicted, p.w, p.h);
            let cic = cic_scores(&model, &image, &maps, predicted);
            let abl = ablation_scores(&model, &image, &maps, &textures, predicted);
            let mut mask = vec![0.0f32; p.height * p.width];
            let (y0, _) = cell_span(r0, p.w, p.height);
            let (_, y1) = cell_span(r0 + rows - 1, p.w, p.height);
            let (x0, _) = cell_span(c0, p.h, p.width);
            let (_, x1) = cell_span(c0 + cols - 1, p.h, p.width);
            for y in y0..y1 {
                mask[y * p.width + x0..y * p.width + x1].fill(1.0);
            }
            let blurred = default_blur(&image);
            let vec_t = |v: Vec<f64>| Tensor::from_f64(vec![p.k], &v).expect("dims");
            records.push(ImageRecord::new(
                id,
                Some(class),
                class_scores,
                maps,
                vec_t(grads),
                vec_t(cic),
                vec_t(abl),
                Some(image),
                Some(blurred),
                Some(Tensor::new(vec![p.height, p.width], mask).expect("dims")),
            )?);
        }
    }
    let classes = (0..p.n_classes).map(|c| format!("class{c}")).collect();
    let mut dataset = Dataset::from_records(classes, records, None)?;
    dataset.image_dims = Some(model.input_dims());
    Ok(Synthetic { dataset, model })
}

pub const STUB_DIR: &str = "stub";

/// Writes a generated dataset plus its stub model under `dir`; returns the
/// manifest path.
pub fn write_synthetic(s: &Synthetic, dir: &Path) -> Result<PathBuf, SynthError> {
    s.model.save(&dir.join(STUB_DIR))?;
    Ok(write_dataset(&s.dataset, dir, Some(&format!("{STUB_DIR}/spec.json")))?)
}

pub fn make_synthetic_dataset(p: &SyntheticParams, dir: &Path) -> Result<PathBuf, SynthError> {
    write_synthetic(&generate_synthetic(p)?, dir)
}

/// Which terminal is made optimal for the images of each predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    /// Indexed by predicted class.
    pub per_class: Vec<TerminalKind>,
    /// Mask size as a fraction of the image pixels.
    pub mask_fraction: f64,
}

impl PlantSpec {
    pub fn single(kind: TerminalKind, n_classes: usize) -> Self {
        Self {
            per_class: vec![kind; n_classes],
            mask_fraction: 0.25,
        }
    }
}

/// Replaces every terminal vector with noise and rewrites each ground-truth
/// mask as the top-`p` pixels of the planted terminal's heatmap, so that
/// terminal scores m_GT = 1 on its class while the others are random.
pub fn plant_optima(ds: &mut Dataset, spec: &PlantSpec, seed: u64) -> Result<(), SynthError> {
    if spec.per_class.len() != ds.num_classes() {
        return Err(SynthError::InvalidParams(format!(
            "plant spec names {} classes, dataset has {}",
            spec.per_class.len(),
            ds.num_classes()
        )));
    }
    if let Some(bad) = spec.per_class.iter().find(|k| k.top_n().is_some()) {
        return Err(SynthError::InvalidParams(format!("cannot plant derived terminal {bad}")));
    }
    if !(spec.mask_fraction > 0.0 && spec.mask_fraction <= 1.0) {
        return Err(SynthError::InvalidParams("mask_fraction must lie in (0, 1]".into()));
    }
    let [k, _, _] = ds.grid;
    let [_, rows, cols] = ds
        .image_dims
        .ok_or_else(|| SynthError::InvalidParams("planting needs image dims".into()))?;
    let p = ((spec.mask_fraction * (rows * cols) as f64).round() as usize).clamp(1, rows * cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rec in &mut ds.records {
        let planted = spec.per_class[rec.predicted_class];
        for kind in [TerminalKind::Grads, TerminalKind::CicScores, TerminalKind::AblScores] {
            // Redraw until the map is non-constant so that ties cannot hand
            // other expressions a perfect score.
            loop {
                let v = Tensor::new(vec![k], uniform(&mut rng, k, -1.0, 1.0)).expect("dims");
                match kind {
                    TerminalKind::Grads => rec.grads = v,
                    TerminalKind::CicScores => rec.cic_scores = v,
                    _ => rec.abl_scores = v,
                }
                let map = build_saliency(&eval_weights(&Expr::terminal(kind), rec).expect("terminal"), rec);
                if map.normalized.iter().any(|&x| x > 0.0) {
                    break;
                }
            }
        }
        let map = build_saliency(&eval_weights(&Expr::terminal(planted), rec).expect("terminal"), rec);
        let heat = upsampled_heatmap(&map, rows, cols);
        let mut order: Vec<usize> = (0..heat.len()).collect();
        order.sort_by(|&a, &b| heat[b].total_cmp(&heat[a]));
        let mut mask = vec![0.0f32; rows * cols];
        for &i in &order[..p] {
            mask[i] = 1.0;
        }
        rec.gt_mask = Some(Tensor::new(vec![rows, cols], mask).expect("dims"));
        rec.validate()?;
    }
    Ok(())
}

/// Synthetic dataset with planted optima, written under `dir`.
pub fn make_planted_dataset(p: &SyntheticParams, spec: &PlantSpec, dir: &Path) -> Result<PathBuf, SynthError> {
    let mut s = generate_synthetic(p)?;
    plant_optima(&mut s.dataset, spec, p.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    write_synthetic(&s, dir)
}
