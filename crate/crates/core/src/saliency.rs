//! Saliency maps and the image operations the metrics are built from.

use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::expr::WeightVector;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapabilityError {
    #[error("record {record} lacks `{field}`, required by {needed_by}")]
    Missing {
        record: String,
        field: &'static str,
        needed_by: &'static str,
    },
}

/// `w`x`h` activation map with its ReLU + min-max normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub w: usize,
    pub h: usize,
    /// `sum_k weight_k * A_k`, row-major.
    pub raw: Vec<f64>,
    /// `minmax(relu(raw))`; all zeros when `relu(raw)` is constant.
    pub normalized: Vec<f64>,
}

impl SaliencyMap {
    pub fn from_raw(w: usize, h: usize, raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), w * h);
        let relu: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let (lo, hi) = relu
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let normalized = if hi > lo {
            relu.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; relu.len()]
        };
        Self { w, h, raw, normalized }
    }

    pub fn raw_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.w, self.h], &self.raw).expect("map dims")
    }

    pub fn normalized_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.w, self.h], &self.normalized).expect("map dims")
    }
}

/// `raw[i,j] = sum_k wv[k] * feature_maps[k,i,j]`.
pub fn build_saliency(wv: &WeightVector, rec: &ImageRecord) -> SaliencyMap {
    let (w, h) = rec.grid();
    let k = rec.num_channels();
    assert_eq!(wv.len(), k, "weight vector length must equal K");
    let plane = w * h;
    let maps = rec.feature_maps.data();
    let mut raw = vec![0.0f64; plane];
    for (c, &weight) in wv.values().iter().enumerate() {
        let a = &maps[c * plane..(c + 1) * plane];
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += weight * f64::from(v);
        }
    }
    SaliencyMap::from_raw(w, h, raw)
}

/// Bilinear upsampling of a row-major `w`x`h` map to `out_h`x`out_w` with
/// corner-aligned sampling (output corners land exactly on input corners).
pub fn upsample_bilinear(map: &[f64], w: usize, h: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    assert_eq!(map.len(), w * h);
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                if n_in == 1 || n_out == 1 {
                    return (0, 0, 0.0);
                }
                let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = coords(w, out_rows);
    let cols = coords(h, out_cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = map[r0 * h + c0] * (1.0 - fc) + map[r0 * h + c1] * fc;
            let bottom = map[r1 * h + c0] * (1.0 - fc) + map[r1 * h + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Tensor wrapper over [`upsample_bilinear`] for `[w, h]` maps.
pub fn upsample_tensor(m: &Tensor, out_rows: usize, out_cols: usize) -> Tensor {
    let d = m.dims();
    assert_eq!(d.len(), 2, "expected a [w, h] map");
    let up = upsample_bilinear(&m.to_f64(), d[0], d[1], out_rows, out_cols);
    Tensor::from_f64(vec![out_rows, out_cols], &up).expect("dims")
}

/// Grid cells ordered by descending saliency, ties by row-major index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRanking {
    pub w: usize,
    pub h: usize,
    /// `(row, col)` pairs.
    pub cells: Vec<(usize, usize)>,
}

/// Ranks cells by the normalized map.
///
/// The comparison runs on `relu(raw)`, which orders cells exactly like the
/// normalized map but without the rounding of the min-max division.
pub fn rank_cells(m: &SaliencyMap) -> CellRanking {
    let key: Vec<f64> = m.raw.iter().map(|v| v.max(0.0)).collect();
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]));
    CellRanking {
        w: m.w,
        h: m.h,
        cells: order.into_iter().map(|i| (i / m.h, i % m.h)).collect(),
    }
}

/// Pixel span `[start, end)` of grid cell `index` when `pixels` are split
/// into `cells` neighborhoods; the last cell absorbs any remainder.
pub fn cell_span(index: usize, cells: usize, pixels: usize) -> (usize, usize) {
    let step = pixels / cells;
    let start = index * step;
    let end = if index + 1 == cells { pixels } else { start + step };
    (start, end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Delete,
    Insert,
}

/// Copies the pixel block of grid cell `(row, col)` from `src` into `dst`,
/// over every channel. Both are `[ch, H, W]`.
pub fn copy_cell(dst: &mut Tensor, src: &Tensor, cell: (usize, usize), grid: (usize, usize)) {
    let d = src.dims();
    let (ch, rows, cols) = (d[0], d[1], d[2]);
    let (r0, r1) = cell_span(cell.0, grid.0, rows);
    let (c0, c1) = cell_span(cell.1, grid.1, cols);
    let src = src.data();
    let dst = dst.data_mut();
    for c in 0..ch {
        for r in r0..r1 {
            let base = (c * rows + r) * cols;
            dst[base + c0..base + c1].copy_from_slice(&src[base + c0..base + c1]);
        }
    }
}

/// The `j`-th perturbed image.
///
/// `Delete` starts from the image and blurs the top-`j` cells; `Insert`
/// starts from the blurred image and restores the top-`j` cells.
pub fn perturb(
    rec: &ImageRecord,
    ranking: &CellRanking,
    j: usize,
    direction: Direction,
) -> Result<Tensor, CapabilityError> {
    let needed_by = match direction {
        Direction::Delete => "deletion",
        Direction::Insert => "insertion",
    };
    let image = rec.image.as_ref().ok_or_else(|| CapabilityError::Missing {
        record: rec.image_id.clone(),
        field: "image",
        needed_by,
    })?;
    let blurred = rec.blurred_image.as_ref().ok_or_else(|| CapabilityError::Missing {
        record: rec.image_id.clone(),
        field: "blurred_image",
        needed_by,
    })?;
    let (start, fill) = match direction {
        Direction::Delete => (image, blurred),
        Direction::Insert => (blurred, image),
    };
    let mut out = start.clone();
    for &cell in ranking.cells.iter().take(j) {
        copy_cell(&mut out, fill, cell, (ranking.w, ranking.h));
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mirror index without repeating the edge (`dcb|abcd|cba`), folded as often
/// as needed for kernels wider than the image.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur of a `[ch, H, W]` image with reflect padding.
pub fn gaussian_blur(image: &Tensor, size: usize, sigma: f64) -> Tensor {
    let d = image.dims();
    let (ch, rows, cols) = (d[0], d[1], d[2]);
    let kernel = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let src = image.to_f64();
    let mut tmp = vec![0.0f64; src.len()];
    for c in 0..ch {
        for y in 0..rows {
            for x in 0..cols {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, cols);
                    acc += kv * src[(c * rows + y) * cols + xx];
                }
                tmp[(c * rows + y) * cols + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; src.len()];
    for c in 0..ch {
        for y in 0..rows {
            for x in 0..cols {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, rows);
                    acc += kv * tmp[(c * rows + yy) * cols + x];
                }
                out[(c * rows + y) * cols + x] = acc;
            }
        }
    }
    Tensor::from_f64(d.to_vec(), &out).expect("same dims")
}

pub const BLUR_KERNEL: usize = 51;
pub const BLUR_SIGMA: f64 = 50.0;

/// The deterministic baseline `x̄` used by Deletion/Insertion.
pub fn default_blur(image: &Tensor) -> Tensor {
    gaussian_blur(image, BLUR_KERNEL, BLUR_SIGMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::record;

    fn two_channel_record() -> ImageRecord {
        let mut r = record("r", 2, 2, 2, [0.5, 0.5]);
        r.feature_maps = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        r
    }

    #[test]
    fn build_saliency_hand_example() {
        let r = two_channel_record();
        let m = build_saliency(&WeightVector(vec![2.0, 1.0]), &r);
        assert_eq!(m.raw, vec![2.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.normalized, vec![1.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let r = two_channel_record();
        let m = build_saliency(&WeightVector(vec![0.0, 0.0]), &r);
        assert!(m.raw.iter().all(|&v| v == 0.0));
        assert!(m.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_scale_keeps_normalized_map() {
        let r = two_channel_record();
        let a = build_saliency(&WeightVector(vec![2.0, 1.0]), &r);
        let b = build_saliency(&WeightVector(vec![8.0, 4.0]), &r);
        assert_eq!(a.normalized, b.normalized);
    }

    #[test]
    fn constant_map_stays_constant() {
        let up = upsample_bilinear(&[0.5; 6], 2, 3, 7, 11);
        assert!(up.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn row_vector_endpoints_and_monotone() {
        let up = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[3], 1.0);
        assert!(up.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn upsample_matches_direct_formula() {
        let m = [1.0, 0.0, 0.0, 1.0];
        let up = upsample_bilinear(&m, 2, 2, 4, 4);
        // Oracle: f(y, x) with y, x in [0, 1] is the bilinear patch through the corners.
        for oy in 0..4 {
            for ox in 0..4 {
                let y = oy as f64 / 3.0;
                let x = ox as f64 / 3.0;
                let f = m[0] * (1.0 - y) * (1.0 - x) + m[1] * (1.0 - y) * x + m[2] * y * (1.0 - x) + m[3] * y * x;
                assert!((up[oy * 4 + ox] - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_examples() {
        let m = SaliencyMap::from_raw(2, 2, vec![0.9, 0.1, 0.5, 0.5]);
        assert_eq!(rank_cells(&m).cells, vec![(0, 0), (1, 0), (1, 1), (0, 1)]);
        let flat = SaliencyMap::from_raw(2, 2, vec![0.3; 4]);
        assert_eq!(rank_cells(&flat).cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let dec = SaliencyMap::from_raw(2, 2, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rank_cells(&dec).cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn cell_spans_cover_with_remainder() {
        assert_eq!(cell_span(0, 3, 10), (0, 3));
        assert_eq!(cell_span(2, 3, 10), (6, 10));
        assert_eq!(cell_span(1, 2, 4), (2, 4));
    }

    fn image_pair() -> ImageRecord {
        let mut r = record("r", 2, 2, 2, [0.5, 0.5]);
        r.image = Some(Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap());
        r.blurred_image = Some(Tensor::new(vec![1, 4, 4], vec![-1.0; 16]).unwrap());
        r
    }

    #[test]
    fn perturb_endpoints() {
        let r = image_pair();
        let ranking = rank_cells(&SaliencyMap::from_raw(2, 2, vec![0.1, 0.9, 0.4, 0.2]));
        let img = r.image.as_ref().unwrap();
        let blur = r.blurred_image.as_ref().unwrap();
        assert_eq!(&perturb(&r, &ranking, 0, Direction::Delete).unwrap(), img);
        assert_eq!(&perturb(&r, &ranking, 4, Direction::Delete).unwrap(), blur);
        assert_eq!(&perturb(&r, &ranking, 4, Direction::Insert).unwrap(), img);
        assert_eq!(&perturb(&r, &ranking, 0, Direction::Insert).unwrap(), blur);
    }

    #[test]
    fn perturb_single_block() {
        let r = image_pair();
        let ranking = rank_cells(&SaliencyMap::from_raw(2, 2, vec![0.1, 0.9, 0.4, 0.2]));
        let out = perturb(&r, &ranking, 1, Direction::Delete).unwrap();
        // Top cell is (0, 1): rows 0..2, cols 2..4.
        for y in 0..4 {
            for x in 0..4 {
                let v = out.data()[y * 4 + x];
                if y < 2 && x >= 2 {
                    assert_eq!(v, -1.0);
                } else {
                    assert_eq!(v, (y * 4 + x) as f32);
                }
            }
        }
    }

    #[test]
    fn perturb_needs_images() {
        let r = record("r", 2, 2, 2, [0.5, 0.5]);
        let ranking = rank_cells(&SaliencyMap::from_raw(2, 2, vec![0.0; 4]));
        assert!(matches!(
            perturb(&r, &ranking, 1, Direction::Delete),
            Err(CapabilityError::Missing { field: "image", .. })
        ));
    }

    #[test]
    fn blur_preserves_constants_and_mean_scale() {
        let img = Tensor::new(vec![2, 5, 3], vec![0.25; 30]).unwrap();
        let b = gaussian_blur(&img, 51, 50.0);
        assert!(b.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(3, 1), 0);
    }
}
