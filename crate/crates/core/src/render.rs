//! Heatmap overlays written as RGB PNG.

use std::path::Path;

use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::expr::{ExprError, WeightSource};
use crate::metrics::upsampled_heatmap;
use crate::saliency::{build_saliency, CapabilityError};
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Capability(#[from] CapabilityError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("image must be [ch, H, W] with ch = 1 or 3, got {0:?}")]
    Channels(Vec<usize>),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Entry `i` of the 256-color jet table:
/// `r = clamp(1.5 - |4x - 3|)`, `g = clamp(1.5 - |4x - 2|)`,
/// `b = clamp(1.5 - |4x - 1|)` with `x = i / 255`, rounded to 8 bits.
pub fn jet(i: u8) -> [u8; 3] {
    let x = f64::from(i) / 255.0;
    let ch = |c: f64| (clamp01(1.5 - (4.0 * x - c).abs()) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn jet_table() -> [[u8; 3]; 256] {
    std::array::from_fn(|i| jet(i as u8))
}

/// Color of a heat value in `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    jet((clamp01(v) * 255.0).round() as u8)
}

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// `(1 - alpha) * image + alpha * colormap(heat)` per channel, clamped.
/// `heat` is `H*W` row-major; single-channel images are shown as gray.
pub fn overlay(image: &Tensor, heat: &[f64], alpha: f64) -> Result<Rgb, RenderError> {
    let d = image.dims();
    if d.len() != 3 || !(d[0] == 1 || d[0] == 3) {
        return Err(RenderError::Channels(d.to_vec()));
    }
    let (ch, rows, cols) = (d[0], d[1], d[2]);
    let plane = rows * cols;
    assert_eq!(heat.len(), plane, "heatmap must match the image plane");
    let px = image.data();
    let mut data = Vec::with_capacity(plane * 3);
    for (p, &h) in heat.iter().enumerate() {
        let color = colormap(h);
        for (c, &cm) in color.iter().enumerate() {
            let src = if ch == 1 { 0 } else { c };
            let v = (1.0 - alpha) * f64::from(px[src * plane + p]) + alpha * f64::from(cm) / 255.0;
            data.push((clamp01(v) * 255.0).round() as u8);
        }
    }
    Ok(Rgb {
        width: cols,
        height: rows,
        data,
    })
}

pub fn encode_png(rgb: &Rgb) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, rgb.width as u32, rgb.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&rgb.data)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Overlay of `src`'s heatmap on the record's image.
pub fn render_record(src: &dyn WeightSource, rec: &ImageRecord) -> Result<Rgb, RenderError> {
    let image = rec.image.as_ref().ok_or_else(|| CapabilityError::Missing {
        record: rec.image_id.clone(),
        field: "image",
        needed_by: "render",
    })?;
    let map = build_saliency(&src.weights(rec)?, rec);
    let d = image.dims();
    let heat = upsampled_heatmap(&map, d[1], d[2]);
    overlay(image, &heat, OVERLAY_ALPHA)
}

pub fn render_png(src: &dyn WeightSource, rec: &ImageRecord, out: &Path) -> Result<(), RenderError> {
    let bytes = encode_png(&render_record(src, rec)?)?;
    std::fs::write(out, bytes).map_err(|source| RenderError::Io {
        path: out.display().to_string(),
        source,
    })
}
