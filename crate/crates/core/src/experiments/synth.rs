// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic annotated cases: rendered scenes with per-object masks.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotations::{write_annotations, CaseAnnotation};
use crate::error::Result;
use crate::mm::scene::{Scene, COLORS, IMAGE_ANIMALS};
use crate::model::VisionConfig;

/// Writes `count` cases under `dir` (`images/`, `masks/`, `cases.jsonl`) and
/// returns them. Half the scenes also show the distractor animal.
pub fn write_synthetic_cases(
    dir: &Path,
    vision: VisionConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<CaseAnnotation>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    while cases.len() < count {
        let pair: Vec<&str> = IMAGE_ANIMALS
            .choose_multiple(&mut rng, 2)
            .map(|(a, _)| *a)
            .collect();
        let colors: Vec<&str> = COLORS
            .choose_multiple(&mut rng, 2)
            .map(|c| c.name)
            .collect();
        let with_distractor = rng.random_bool(0.5);
        let objects: Vec<(&str, &str)> = if with_distractor {
            vec![(pair[0], colors[0]), (pair[1], colors[1])]
        } else {
            vec![(pair[0], colors[0])]
        };
        let Ok(scene) = Scene::sample(vision.grid, vision.patch_size, &objects, &mut rng) else {
            continue;
        };
        let n = cases.len();
        let image = format!("images/scene_{n:04}.png");
        let mask = format!("masks/scene_{n:04}.png");
        scene.render().save(dir.join(&image))?;
        scene.mask(0)?.save(dir.join(&mask))?;
        cases.push(CaseAnnotation {
            image: Some(image.into()),
            animal: pair[0].into(),
            color: colors[0].into(),
            distractor: pair[1].into(),
            split: Some("synthetic".into()),
            mask: Some(mask.into()),
        });
    }
    std::fs::write(dir.join("cases.jsonl"), write_annotations(&cases))?;
    Ok(cases)
}
