//! The synthetic generator's terminals against independent recomputation:
//! a tent-weight upsampler, a hand-written linear softmax classifier and
//! finite differences for the pooled gradients.

use sycam::backend::StubModel;
use sycam::synthetic::{generate_synthetic, Synthetic, SyntheticParams};
use sycam::ImageRecord;

fn params(seed: u64) -> SyntheticParams {
    SyntheticParams {
        n_classes: 3,
        images_per_class: 2,
        k: 5,
        w: 3,
        h: 4,
        ch: 2,
        height: 9,
        width: 8,
        seed,
    }
}

/// Corner-aligned bilinear upsampling written as a sum of tent weights.
fn tent_upsample(map: &[f64], w: usize, h: usize, rows: usize, cols: usize) -> Vec<f64> {
    let pos = |o: usize, n_in: usize, n_out: usize| {
        if n_in == 1 || n_out == 1 {
            0.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let (sy, sx) = (pos(y, w, rows), pos(x, h, cols));
            let mut acc = 0.0;
            for i in 0..w {
                for j in 0..h {
                    acc += map[i * h + j] * tent(sy - i as f64) * tent(sx - j as f64);
                }
            }
            out[y * cols + x] = acc;
        }
    }
    out
}

struct Oracle<'a> {
    model: &'a StubModel,
    p: SyntheticParams,
}

impl Oracle<'_> {
    fn compose(&self, maps: &[f64]) -> Vec<f64> {
        let p = &self.p;
        let plane = p.height * p.width;
        let tex = self.model.textures().unwrap().to_f64();
        let mut img = vec![0.0; p.ch * plane];
        for k in 0..p.k {
            let up = tent_upsample(&maps[k * p.w * p.h..(k + 1) * p.w * p.h], p.w, p.h, p.height, p.width);
            for (i, v) in img.iter_mut().enumerate() {
                *v += up[i % plane] * tex[k * p.ch * plane + i] / p.k as f64;
            }
        }
        img
    }

    fn probs(&self, img: &[f64]) -> Vec<f64> {
        let w = self.model.weights().to_f64();
        let n = img.len();
        let logits: Vec<f64> = (0..self.p.n_classes)
            .map(|c| w[c * n..(c + 1) * n].iter().zip(img).map(|(a, b)| a * b).sum::<f64>() / self.model.temperature())
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
}

fn check_record(o: &Oracle<'_>, rec: &ImageRecord) {
    let p = &o.p;
    let maps = rec.feature_maps.to_f64();
    let img = o.compose(&maps);
    let stored = rec.image.as_ref().unwrap().to_f64();
    for (a, b) in img.iter().zip(&stored) {
        assert!((a - b).abs() < 1e-6, "image {a} vs {b}");
    }
    let probs = o.probs(&stored);
    for (a, b) in probs.iter().zip(rec.class_scores.data()) {
        assert!((a - f64::from(*b)).abs() < 1e-6);
    }
    let c = rec.predicted_class;
    let y = probs[c];

    // Pooled gradient: mean over grid cells of dY^c / dA_k(i, j).
    let eps = 1e-4;
    let grads = rec.grads.to_f64();
    let scale = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for k in 0..p.k {
        let mut sum = 0.0;
        for cell in 0..p.w * p.h {
            let idx = k * p.w * p.h + cell;
            let mut plus = maps.clone();
            plus[idx] += eps;
            let mut minus = maps.clone();
            minus[idx] -= eps;
            sum += (o.probs(&o.compose(&plus))[c] - o.probs(&o.compose(&minus))[c]) / (2.0 * eps);
        }
        let fd = sum / (p.w * p.h) as f64;
        assert!((fd - grads[k]).abs() <= 1e-3 * scale, "grad {k}: fd {fd} vs {}", grads[k]);
    }

    let plane = p.height * p.width;
    let cic = rec.cic_scores.to_f64();
    let abl = rec.abl_scores.to_f64();
    for k in 0..p.k {
        let up = tent_upsample(&maps[k * p.w * p.h..(k + 1) * p.w * p.h], p.w, p.h, p.height, p.width);
        let (lo, hi) = up.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let masked: Vec<f64> = stored
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = if hi > lo { (up[i % plane] - lo) / (hi - lo) } else { 0.0 };
                // the generator hands the classifier f32 pixels
                f64::from((v * s) as f32)
            })
            .collect();
        let want = o.probs(&masked)[c];
        assert!((want - cic[k]).abs() < 1e-5, "cic {k}: {want} vs {}", cic[k]);

        let mut ablated = maps.clone();
        ablated[k * p.w * p.h..(k + 1) * p.w * p.h].fill(0.0);
        let yk = o.probs(&o.compose(&ablated))[c];
        let want = (y - yk) / y;
        assert!((want - abl[k]).abs() < 1e-5 * want.abs().max(1.0), "abl {k}: {want} vs {}", abl[k]);
    }
}

#[test]
fn terminals_match_independent_recomputation() {
    for seed in [1, 2] {
        let Synthetic { dataset, model } = generate_synthetic(&params(seed)).unwrap();
        let o = Oracle { model: &model, p: params(seed) };
        assert_eq!(dataset.len(), 6);
        for rec in &dataset.records {
            check_record(&o, rec);
        }
    }
}

#[test]
fn masks_cover_the_boosted_rectangle() {
    let p = params(4);
    let s = generate_synthetic(&p).unwrap();
    let (bh, bw) = (p.height / p.w, p.width / p.h);
    for rec in &s.dataset.records {
        let class = rec.true_class.unwrap();
        let maps = rec.feature_maps.data();
        let mask = rec.gt_mask.as_ref().unwrap().data();
        for k in (0..p.k).filter(|k| k % p.n_classes == class) {
            for i in 0..p.w {
                for j in 0..p.h {
                    let boosted = maps[(k * p.w + i) * p.h + j] >= 0.7;
                    let covered = mask[(i * bh) * p.width + j * bw] == 1.0;
                    assert_eq!(boosted, covered, "{} cell ({i},{j})", rec.image_id);
                }
            }
        }
        let cells = (0..p.w * p.h).filter(|&c| maps[(class % p.k) * p.w * p.h + c] >= 0.7).count();
        let on = mask.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(on, cells * bh * bw);
    }
}
