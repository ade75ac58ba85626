// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ranked_heads, Attributor};
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::trace::{HeadId, Trace};

/// Head importance averaged over cases and normalized to shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub cases: usize,
    /// Mean raw score per head, row-major.
    pub mean_scores: Vec<f64>,
    /// Negative means clamped to zero, then divided by the positive total.
    pub shares: Vec<f64>,
}

impl HeadProfile {
    pub fn from_mean_scores(
        model_id: impl Into<String>,
        n_layers: usize,
        n_heads: usize,
        cases: usize,
        mean_scores: Vec<f64>,
    ) -> Result<Self> {
        if mean_scores.len() != n_layers * n_heads {
            return Err(Error::shape(format!(
                "{} scores for {n_layers}x{n_heads} heads",
                mean_scores.len()
            )));
        }
        let shares = normalize(&mean_scores).ok_or(Error::NoPositiveHeads)?;
        Ok(Self {
            model_id: model_id.into(),
            n_layers,
            n_heads,
            cases,
            mean_scores,
            shares,
        })
    }

    pub fn share(&self, head: HeadId) -> f64 {
        self.shares[head.flat(self.n_heads)]
    }

    pub fn mean_score(&self, head: HeadId) -> f64 {
        self.mean_scores[head.flat(self.n_heads)]
    }

    /// Heads by descending mean score, ties by ascending `(layer, head)`.
    pub fn top_k(&self, k: usize) -> Vec<HeadId> {
        let mut r = ranked_heads(&self.mean_scores, self.n_heads);
        r.truncate(k);
        r
    }

    pub fn head_count(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

pub(crate) fn normalize(scores: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = scores.iter().map(|&s| s.max(0.0)).sum();
    if !total.is_finite() || total <= 0.0 {
        return None;
    }
    Some(scores.iter().map(|&s| s.max(0.0) / total).collect())
}

/// Mean head scores over `(trace, target)` cases, normalized to shares.
pub fn head_importance_profile(cases: &[(&Trace, TokenId)]) -> Result<HeadProfile> {
    let (first, _) = cases
        .first()
        .ok_or_else(|| Error::input("head profile needs at least one case"))?;
    let (n_layers, n_heads) = (first.n_layers(), first.n_heads());
    let model_id = first.model().id().to_owned();
    let mut sum = vec![0.0; n_layers * n_heads];
    for (trace, target) in cases {
        if trace.model().id() != model_id
            || trace.n_layers() != n_layers
            || trace.n_heads() != n_heads
        {
            return Err(Error::input("head profile cases span different models"));
        }
        let scores = Attributor::new(trace, *target)?.all_heads()?;
        for (s, v) in sum.iter_mut().zip(&scores.values) {
            *s += v;
        }
    }
    let n = cases.len() as f64;
    let mean = sum.into_iter().map(|s| s / n).collect();
    HeadProfile::from_mean_scores(model_id, n_layers, n_heads, cases.len(), mean)
}

/// Size of the intersection of both profiles' top-`k` head sets.
pub fn top_head_overlap(a: &HeadProfile, b: &HeadProfile, k: usize) -> Result<usize> {
    if a.n_layers != b.n_layers || a.n_heads != b.n_heads {
        return Err(Error::input(format!(
            "profiles have different shapes: {}x{} vs {}x{}",
            a.n_layers, a.n_heads, b.n_layers, b.n_heads
        )));
    }
    if k == 0 || k > a.head_count() {
        return Err(Error::input(format!(
            "k = {k} outside 1..={}",
            a.head_count()
        )));
    }
    let sa: BTreeSet<HeadId> = a.top_k(k).into_iter().collect();
    Ok(b.top_k(k).into_iter().filter(|h| sa.contains(h)).count())
}
