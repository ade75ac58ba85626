// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic scenes: flat-colored shapes on a plain background, one shape
//! per animal species.

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GridDims;

pub const BACKGROUND: [u8; 3] = [245, 245, 240];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const COLORS: [PaletteColor; 10] = [
    PaletteColor {
        name: "red",
        rgb: [220, 40, 40],
    },
    PaletteColor {
        name: "green",
        rgb: [40, 160, 60],
    },
    PaletteColor {
        name: "blue",
        rgb: [40, 80, 220],
    },
    PaletteColor {
        name: "yellow",
        rgb: [235, 205, 30],
    },
    PaletteColor {
        name: "brown",
        rgb: [125, 75, 35],
    },
    PaletteColor {
        name: "black",
        rgb: [25, 25, 25],
    },
    PaletteColor {
        name: "orange",
        rgb: [250, 140, 20],
    },
    PaletteColor {
        name: "purple",
        rgb: [130, 50, 170],
    },
    PaletteColor {
        name: "pink",
        rgb: [245, 140, 190],
    },
    PaletteColor {
        name: "gray",
        rgb: [128, 128, 128],
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    WideRect,
}

/// Animals that can appear in images, with the shape that depicts them.
pub const IMAGE_ANIMALS: [(&str, Shape); 4] = [
    ("dog", Shape::Circle),
    ("cat", Shape::Square),
    ("bird", Shape::Triangle),
    ("horse", Shape::WideRect),
];

/// Animals usable in text-only prompts.
pub const TEXT_ANIMALS: [&str; 10] = [
    "dog", "cat", "bird", "horse", "cow", "fox", "pig", "bear", "sheep", "duck",
];

pub fn color_index(name: &str) -> Option<usize> {
    COLORS.iter().position(|c| c.name == name)
}

pub fn shape_of(animal: &str) -> Option<Shape> {
    IMAGE_ANIMALS
        .iter()
        .find(|(a, _)| *a == animal)
        .map(|(_, s)| *s)
}

pub fn animal_of(shape: Shape) -> &'static str {
    IMAGE_ANIMALS
        .iter()
        .find(|(_, s)| *s == shape)
        .map(|(a, _)| *a)
        .expect("every shape has an animal")
}

/// One shape placed on the cell grid; `row`, `col`, `rows`, `cols` are in cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub animal: String,
    pub color: String,
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: GridDims,
    pub patch: u32,
    pub objects: Vec<SceneObject>,
}

fn footprint(shape: Shape, rng: &mut impl Rng) -> (usize, usize) {
    match shape {
        Shape::Square => {
            let s = rng.random_range(2..=3);
            (s, s)
        }
        Shape::Circle | Shape::Triangle => {
            let s = rng.random_range(3..=4);
            (s, s)
        }
        Shape::WideRect => (2, rng.random_range(4..=5)),
    }
}

impl Scene {
    /// Places `animals` (image animals) with the given colors at random
    /// non-touching positions. Fails if the grid is too crowded.
    pub fn sample(
        grid: GridDims,
        patch: u32,
        animals: &[(&str, &str)],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut objects: Vec<SceneObject> = Vec::new();
        for &(animal, color) in animals {
            let shape = shape_of(animal)
                .ok_or_else(|| Error::input(format!("`{animal}` cannot be drawn")))?;
            color_index(color).ok_or_else(|| Error::input(format!("unknown color `{color}`")))?;
            let mut placed = false;
            for _ in 0..200 {
                let (h, w) = footprint(shape, rng);
                if h > grid.rows || w > grid.cols {
                    continue;
                }
                let row = rng.random_range(0..=grid.rows - h);
                let col = rng.random_range(0..=grid.cols - w);
                let clear = objects.iter().all(|o| {
                    row + h < o.row
                        || o.row + o.rows < row
                        || col + w < o.col
                        || o.col + o.cols < col
                });
                if clear {
                    objects.push(SceneObject {
                        animal: animal.to_owned(),
                        color: color.to_owned(),
                        row,
                        col,
                        rows: h,
                        cols: w,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::input("could not place every object on the grid"));
            }
        }
        Ok(Self {
            grid,
            patch,
            objects,
        })
    }

    /// Draws `count` distinct image animals with distinct colors.
    pub fn random(grid: GridDims, patch: u32, count: usize, rng: &mut impl Rng) -> Result<Self> {
        let animals: Vec<&str> = IMAGE_ANIMALS
            .choose_multiple(rng, count)
            .map(|(a, _)| *a)
            .collect();
        let colors: Vec<&str> = COLORS.choose_multiple(rng, count).map(|c| c.name).collect();
        let pairs: Vec<(&str, &str)> = animals.into_iter().zip(colors).collect();
        Self::sample(grid, patch, &pairs, rng)
    }

    pub fn image_size(&self) -> (u32, u32) {
        (
            self.grid.cols as u32 * self.patch,
            self.grid.rows as u32 * self.patch,
        )
    }

    pub fn render(&self) -> RgbImage {
        let (w, h) = self.image_size();
        let mut img = RgbImage::from_pixel(w, h, Rgb(BACKGROUND));
        for o in &self.objects {
            let shape = shape_of(&o.animal).expect("validated at construction");
            let rgb = Rgb(COLORS[color_index(&o.color).expect("validated")].rgb);
            let p = self.patch as f64;
            let (x0, y0) = (o.col as f64 * p, o.row as f64 * p);
            let (bw, bh) = (o.cols as f64 * p, o.rows as f64 * p);
            for y in (y0 as u32)..((y0 + bh) as u32) {
                for x in (x0 as u32)..((x0 + bw) as u32) {
                    let (fx, fy) = (x as f64 + 0.5 - x0, y as f64 + 0.5 - y0);
                    let inside = match shape {
                        Shape::Square | Shape::WideRect => true,
                        Shape::Circle => {
                            let r = bw.min(bh) / 2.0;
                            (fx - bw / 2.0).powi(2) + (fy - bh / 2.0).powi(2) <= r * r
                        }
                        Shape::Triangle => (fx - bw / 2.0).abs() <= fy / bh * bw / 2.0,
                    };
                    if inside {
                        img.put_pixel(x, y, rgb);
                    }
                }
            }
        }
        img
    }

    /// Pixel mask of one object (255 inside).
    pub fn mask(&self, index: usize) -> Result<image::GrayImage> {
        let o = self
            .objects
            .get(index)
            .ok_or_else(|| Error::index(format!("object {index} of {}", self.objects.len())))?;
        let only = Scene {
            grid: self.grid,
            patch: self.patch,
            objects: vec![o.clone()],
        };
        let img = only.render();
        Ok(image::GrayImage::from_fn(
            img.width(),
            img.height(),
            |x, y| {
                image::Luma([if img.get_pixel(x, y).0 == BACKGROUND {
                    0
                } else {
                    255
                }])
            },
        ))
    }
}
