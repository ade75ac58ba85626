// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image to visual-embedding block.

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array2;
use serde::Serialize;

use super::scene::{animal_of, Shape, BACKGROUND, COLORS};
use crate::error::{Error, Result};
use crate::model::{GridDims, Model, TokenId, VisionConfig};

/// Token the stub encoder uses for empty patches.
pub const BACKGROUND_TOKEN: &str = "<bg>";

/// Turns a preprocessed image into one embedding row per grid cell.
pub trait VisionEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn vision(&self) -> VisionConfig;
    /// `image` is already cropped and resized to `vision().image_size()`.
    fn encode(&self, image: &RgbImage) -> Result<Array2<f32>>;
}

/// Center-crops to the target aspect ratio and resizes to `(width, height)`.
pub fn preprocess(image: &DynamicImage, (tw, th): (u32, u32)) -> RgbImage {
    let (w, h) = (image.width() as u64, image.height() as u64);
    let (tw64, th64) = (tw as u64, th as u64);
    let (cw, ch) = if w * th64 > h * tw64 {
        ((h * tw64 / th64).max(1), h)
    } else {
        (w, (w * th64 / tw64).max(1))
    };
    let cropped = image.crop_imm(
        ((w - cw) / 2) as u32,
        ((h - ch) / 2) as u32,
        cw as u32,
        ch as u32,
    );
    let rgb = cropped.to_rgb8();
    if rgb.dimensions() == (tw, th) {
        rgb
    } else {
        image::imageops::resize(&rgb, tw, th, FilterType::Triangle)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    if bytes.is_empty() {
        return Err(Error::input("empty image"));
    }
    Ok(image::load_from_memory(bytes)?)
}

/// Content of one patch as seen by the stub encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellLabel {
    pub color: &'static str,
    pub animal: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectedObject {
    pub color: &'static str,
    pub animal: &'static str,
    pub pixels: usize,
    /// `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub bbox: (u32, u32, u32, u32),
    /// Row-major indices of the cells labelled with this object.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchLabels {
    pub grid: GridDims,
    pub cells: Vec<Option<CellLabel>>,
    pub objects: Vec<DetectedObject>,
}

impl PatchLabels {
    /// Token ids summed into each cell's embedding.
    pub fn bags(&self, model_vocab: &crate::model::Vocabulary) -> Result<Vec<Vec<TokenId>>> {
        let id = |w: &str| {
            model_vocab
                .id(w)
                .ok_or_else(|| Error::Capability(format!("vocabulary lacks `{w}`")))
        };
        let bg = id(BACKGROUND_TOKEN)?;
        self.cells
            .iter()
            .map(|c| match c {
                None => Ok(vec![bg]),
                Some(l) => Ok(vec![id(l.color)?, id(l.animal)?]),
            })
            .collect()
    }
}

/// Reads flat-colored shapes: pixels snap to the palette, same-colored
/// connected regions become objects, the region's fill ratio and aspect pick
/// the species, and each cell takes the object covering at least a third of it.
/// Cell embeddings are `E[color] + E[animal]`, or `E[<bg>]`.
#[derive(Debug, Clone)]
pub struct ShapeColorEncoder {
    vision: VisionConfig,
    embed_rows: Option<EmbedRows>,
}

#[derive(Debug, Clone)]
struct EmbedRows {
    bg: Vec<f32>,
    colors: Vec<Vec<f32>>,
    animals: Vec<Vec<f32>>,
}

fn classify_pixel(p: [u8; 3]) -> Option<usize> {
    let dist = |c: [u8; 3]| -> i32 { (0..3).map(|i| (p[i] as i32 - c[i] as i32).pow(2)).sum() };
    let mut best = (dist(BACKGROUND), None);
    for (i, c) in COLORS.iter().enumerate() {
        let d = dist(c.rgb);
        if d < best.0 {
            best = (d, Some(i));
        }
    }
    best.1
}

fn classify_shape(pixels: usize, w: u32, h: u32) -> Shape {
    let fill = pixels as f64 / (w as f64 * h as f64);
    let aspect = w.max(h) as f64 / w.min(h) as f64;
    if fill < 0.64 {
        Shape::Triangle
    } else if fill < 0.9 {
        Shape::Circle
    } else if aspect >= 1.5 {
        Shape::WideRect
    } else {
        Shape::Square
    }
}

impl ShapeColorEncoder {
    /// Label-only encoder; `encode` fails until bound to a model.
    pub fn new(vision: VisionConfig) -> Self {
        Self {
            vision,
            embed_rows: None,
        }
    }

    /// Encoder producing rows from `model`'s token embeddings.
    pub fn for_model(model: &Model) -> Result<Self> {
        let vision = model.config().vision.ok_or_else(|| {
            Error::Capability(format!("model `{}` has no vision config", model.id()))
        })?;
        let vocab = model.vocab();
        let row = |w: &str| -> Result<Vec<f32>> {
            let id = vocab
                .id(w)
                .ok_or_else(|| Error::Capability(format!("vocabulary lacks `{w}`")))?;
            Ok(model.weights().embed.row(id as usize).to_vec())
        };
        let rows = EmbedRows {
            bg: row(BACKGROUND_TOKEN)?,
            colors: COLORS.iter().map(|c| row(c.name)).collect::<Result<_>>()?,
            animals: [
                Shape::Circle,
                Shape::Square,
                Shape::Triangle,
                Shape::WideRect,
            ]
            .iter()
            .map(|s| row(animal_of(*s)))
            .collect::<Result<_>>()?,
        };
        Ok(Self {
            vision,
            embed_rows: Some(rows),
        })
    }

    pub fn labels(&self, image: &RgbImage) -> Result<PatchLabels> {
        let (iw, ih) = self.vision.image_size();
        if image.dimensions() != (iw, ih) {
            return Err(Error::shape(format!(
                "encoder expects {iw}x{ih} images, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let (w, h) = (iw as usize, ih as usize);
        let class: Vec<Option<usize>> = image.pixels().map(|p| classify_pixel(p.0)).collect();
        let mut component = vec![usize::MAX; w * h];
        let mut objects: Vec<DetectedObject> = Vec::new();
        let min_pixels = (self.vision.patch_size * self.vision.patch_size / 2) as usize;
        let mut n_comp = 0;
        let mut stack = Vec::new();
        let mut comp_valid: Vec<Option<usize>> = Vec::new();
        for start in 0..w * h {
            let Some(color) = class[start] else { continue };
            if component[start] != usize::MAX {
                continue;
            }
            let id = n_comp;
            n_comp += 1;
            component[start] = id;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let mut count = 0;
            while let Some(i) = stack.pop() {
                count += 1;
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let mut visit = |j: usize| {
                    if component[j] == usize::MAX && class[j] == Some(color) {
                        component[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if count < min_pixels {
                comp_valid.push(None);
                continue;
            }
            let shape = classify_shape(count, (x1 - x0) as u32, (y1 - y0) as u32);
            comp_valid.push(Some(objects.len()));
            objects.push(DetectedObject {
                color: COLORS[color].name,
                animal: animal_of(shape),
                pixels: count,
                bbox: (x0 as u32, y0 as u32, x1 as u32, y1 as u32),
                cells: Vec::new(),
            });
        }
        let grid = self.vision.grid;
        let p = self.vision.patch_size as usize;
        let mut cells = vec![None; grid.cells()];
        let mut counts = vec![0usize; objects.len()];
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                counts.iter_mut().for_each(|n| *n = 0);
                for y in r * p..(r + 1) * p {
                    for x in c * p..(c + 1) * p {
                        let comp = component[y * w + x];
                        if comp != usize::MAX {
                            if let Some(o) = comp_valid[comp] {
                                counts[o] += 1;
                            }
                        }
                    }
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|(i, n)| (**n, usize::MAX - i));
                if let Some((o, &n)) = best {
                    if n * 3 >= p * p {
                        let idx = r * grid.cols + c;
                        cells[idx] = Some(CellLabel {
                            color: objects[o].color,
                            animal: objects[o].animal,
                        });
                        objects[o].cells.push(idx);
                    }
                }
            }
        }
        Ok(PatchLabels {
            grid,
            cells,
            objects,
        })
    }

    pub fn embed(&self, labels: &PatchLabels) -> Result<Array2<f32>> {
        let rows = self
            .embed_rows
            .as_ref()
            .ok_or_else(|| Error::Capability("encoder is not bound to a model".into()))?;
        let d = rows.bg.len();
        let mut out = Array2::zeros((labels.cells.len(), d));
        let animal_index = |a: &str| {
            [
                Shape::Circle,
                Shape::Square,
                Shape::Triangle,
                Shape::WideRect,
            ]
            .iter()
            .position(|s| animal_of(*s) == a)
            .expect("labels only name image animals")
        };
        for (i, cell) in labels.cells.iter().enumerate() {
            let mut row = out.row_mut(i);
            match cell {
                None => row.assign(&ndarray::ArrayView1::from(&rows.bg)),
                Some(l) => {
                    let c =
                        &rows.colors[super::scene::color_index(l.color).expect("palette color")];
                    let a = &rows.animals[animal_index(l.animal)];
                    for j in 0..d {
                        row[j] = c[j] + a[j];
                    }
                }
            }
        }
        Ok(out)
    }
}

impl VisionEncoder for ShapeColorEncoder {
    fn name(&self) -> &str {
        "shape-color"
    }

    fn vision(&self) -> VisionConfig {
        self.vision
    }

    fn encode(&self, image: &RgbImage) -> Result<Array2<f32>> {
        self.embed(&self.labels(image)?)
    }
}

/// Returns the same block for every image.
#[derive(Debug, Clone)]
pub struct ConstantEncoder {
    vision: VisionConfig,
    block: Array2<f32>,
}

impl ConstantEncoder {
    pub fn new(vision: VisionConfig, block: Array2<f32>) -> Result<Self> {
        if block.nrows() != vision.grid.cells() {
            return Err(Error::shape(format!(
                "constant block has {} rows for {} cells",
                block.nrows(),
                vision.grid.cells()
            )));
        }
        Ok(Self { vision, block })
    }
}

impl VisionEncoder for ConstantEncoder {
    fn name(&self) -> &str {
        "constant"
    }

    fn vision(&self) -> VisionConfig {
        self.vision
    }

    fn encode(&self, _image: &RgbImage) -> Result<Array2<f32>> {
        Ok(self.block.clone())
    }
}

/// Cells covered by at least a third by the nonzero pixels of `mask`.
pub fn mask_cells(mask: &GrayImage, grid: GridDims) -> Vec<usize> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut out = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (y0, y1) = (r * h / grid.rows, (r + 1) * h / grid.rows);
            let (x0, x1) = (c * w / grid.cols, (c + 1) * w / grid.cols);
            let mut on = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    on += usize::from(mask.get_pixel(x as u32, y as u32).0[0] > 127);
                }
            }
            let area = (y1 - y0) * (x1 - x0);
            if area > 0 && on * 3 >= area {
                out.push(r * grid.cols + c);
            }
        }
    }
    out
}
