// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-score overlays on the preprocessed image.

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::attribution::{MapMethod, PatchScoreMap, Scaling};
use crate::error::{Error, Result};

/// Weight of the overlay in the blend.
pub const OVERLAY_ALPHA: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct HeatmapRender {
    pub base: RgbImage,
    /// Per-pixel overlay intensity, `255 * scaled score` of the covering cell.
    pub overlay: GrayImage,
    pub blended: RgbImage,
    pub method: MapMethod,
    pub scaling: Scaling,
}

impl HeatmapRender {
    pub fn blended_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.blended)
    }

    pub fn overlay_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.overlay.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Overlays `map` on `image`, lighter where the score is higher. Scores are
/// min-max scaled per map unless a shared `scaling` is given.
pub fn render_heatmap(
    image: &RgbImage,
    map: &PatchScoreMap,
    scaling: Option<Scaling>,
) -> Result<HeatmapRender> {
    let (w, h) = image.dimensions();
    let grid = map.grid;
    if (w as usize) < grid.cols || (h as usize) < grid.rows {
        return Err(Error::shape(format!(
            "{w}x{h} image is smaller than the {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let scaling = scaling.unwrap_or(map.normalization);
    let levels: Vec<u8> = map
        .scaled_with(&scaling)
        .iter()
        .map(|s| (s.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let cell = |x: u32, y: u32| {
        let r = y as usize * grid.rows / h as usize;
        let c = x as usize * grid.cols / w as usize;
        levels[r * grid.cols + c]
    };
    let overlay = GrayImage::from_fn(w, h, |x, y| Luma([cell(x, y)]));
    let blended = RgbImage::from_fn(w, h, |x, y| {
        let o = overlay.get_pixel(x, y).0[0] as f64;
        let p = image.get_pixel(x, y).0;
        let mix = |b: u8| ((1.0 - OVERLAY_ALPHA) * b as f64 + OVERLAY_ALPHA * o).round() as u8;
        Rgb([mix(p[0]), mix(p[1]), mix(p[2])])
    });
    Ok(HeatmapRender {
        base: image.clone(),
        overlay,
        blended,
        method: map.method,
        scaling,
    })
}
