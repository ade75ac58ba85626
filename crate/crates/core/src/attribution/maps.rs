// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{Attributor, HeadSelection};
use crate::error::{Error, Result};
use crate::model::{GridDims, TokenId};
use crate::trace::{HeadId, Trace};

pub const PATCH_MAP_SCHEMA: &str = "patch-score-map-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMethod {
    Logprob,
    AvgAttention,
}

impl MapMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Logprob => "logprob",
            Self::AvgAttention => "avg-attention",
        }
    }
}

/// Range used to map scores into `[0, 1]` for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: f64,
    pub max: f64,
}

impl Scaling {
    pub fn of(scores: &[f64]) -> Self {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// Covers both ranges; used to put two maps on one scale.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    /// Monotone map into `[0, 1]`; a degenerate range maps everything to 0.
    pub fn apply(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span.is_nan() || span <= 0.0 {
            return 0.0;
        }
        ((x - self.min) / span).clamp(0.0, 1.0)
    }
}

/// Scores folded onto the patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreMap {
    pub schema: String,
    pub method: MapMethod,
    pub grid: GridDims,
    pub scores: Vec<f64>,
    pub normalization: Scaling,
    /// Heads that were summed; empty for attention maps over all heads.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<HeadId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TokenId>,
}

impl PatchScoreMap {
    pub fn new(method: MapMethod, grid: GridDims, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.cells() {
            return Err(Error::shape(format!(
                "{} scores for a {}x{} grid",
                scores.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(Self {
            schema: PATCH_MAP_SCHEMA.to_owned(),
            method,
            grid,
            normalization: Scaling::of(&scores),
            scores,
            heads: Vec::new(),
            target: None,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.grid.cols + col]
    }

    /// Display value of every cell under the map's own scaling.
    pub fn scaled(&self) -> Vec<f64> {
        self.scaled_with(&self.normalization)
    }

    pub fn scaled_with(&self, scaling: &Scaling) -> Vec<f64> {
        self.scores.iter().map(|&s| scaling.apply(s)).collect()
    }

    /// Highest-scoring cell; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        (best / self.grid.cols, best % self.grid.cols)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks(self.grid.cols)
    }
}

fn visual_layout(trace: &Trace) -> Result<(GridDims, usize)> {
    let map = trace.position_map();
    match (map.grid(), map.visual_span()) {
        (Some(grid), Some(span)) => Ok((grid, span.start)),
        _ => Err(Error::input("trace has no visual span")),
    }
}

/// Summed per-position score over the selected heads for every patch.
pub fn patch_score_map(
    trace: &Trace,
    target: TokenId,
    selection: &HeadSelection,
) -> Result<PatchScoreMap> {
    let (grid, start) = visual_layout(trace)?;
    let attr = Attributor::new(trace, target)?;
    let heads = match selection {
        HeadSelection::Explicit(_) => {
            let shape = super::HeadScores {
                n_layers: trace.n_layers(),
                n_heads: trace.n_heads(),
                values: vec![0.0; trace.n_layers() * trace.n_heads()],
            };
            selection.resolve(&shape)?
        }
        _ => selection.resolve(&attr.all_heads()?)?,
    };
    patch_score_map_for_heads(&attr, &heads, grid, start)
}

pub(crate) fn patch_score_map_for_heads(
    attr: &Attributor<'_>,
    heads: &[HeadId],
    grid: GridDims,
    start: usize,
) -> Result<PatchScoreMap> {
    let mut scores = vec![0.0; grid.cells()];
    for &h in heads {
        let per_pos = attr.positions(h)?;
        for (cell, s) in scores.iter_mut().enumerate() {
            *s += per_pos[start + cell];
        }
    }
    let mut map = PatchScoreMap::new(MapMethod::Logprob, grid, scores)?;
    map.heads = heads.to_vec();
    map.target = Some(attr.target());
    Ok(map)
}

/// Mean last-position attention over every layer and head, per patch.
pub fn average_attention_map(trace: &Trace) -> Result<PatchScoreMap> {
    let (grid, start) = visual_layout(trace)?;
    let mut scores = vec![0.0; grid.cells()];
    let mut n = 0usize;
    for h in trace.heads() {
        let row = trace.attention(h)?;
        for (cell, s) in scores.iter_mut().enumerate() {
            *s += f64::from(row[start + cell]);
        }
        n += 1;
    }
    for s in &mut scores {
        *s /= n as f64;
    }
    PatchScoreMap::new(MapMethod::AvgAttention, grid, scores)
}
