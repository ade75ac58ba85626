// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head- and position-level importance of a target token.
//!
//! The score of a vector `o` added at layer `l` is
//! `log p(b | o + h_T^{l-1}) - log p(b | h_T^{l-1})`, with `p` the softmax of the
//! final-normalized vector through `E_u`.

mod maps;
mod profile;

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::numeric::{desc_then_index, log_sum_exp};
use crate::trace::{HeadId, Trace};

pub use maps::{average_attention_map, patch_score_map, MapMethod, PatchScoreMap, Scaling};
pub use profile::{head_importance_profile, top_head_overlap, HeadProfile};

/// Default number of heads kept for heatmaps and evidence statistics.
pub const DEFAULT_TOP_K: usize = 10;

/// Scores a target token against additions to the last-position residual.
///
/// Caches the baseline log-probability per layer, so scoring many heads or
/// positions of one trace only pays for the perturbed projection.
pub struct Attributor<'t> {
    trace: &'t Trace,
    target: TokenId,
    base: Vec<(Array1<f64>, f64)>,
}

impl<'t> Attributor<'t> {
    pub fn new(trace: &'t Trace, target: TokenId) -> Result<Self> {
        trace.model().check_token(target)?;
        let model = trace.model();
        let base = (0..trace.n_layers())
            .map(|l| {
                let h = trace.last_residual(l)?;
                let lp = target_log_prob(model, h.view(), target);
                Ok((h, lp))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            trace,
            target,
            base,
        })
    }

    pub fn trace(&self) -> &'t Trace {
        self.trace
    }

    pub fn target(&self) -> TokenId {
        self.target
    }

    /// Score of an arbitrary residual-space vector added before layer `layer`'s output.
    pub fn vector_increase(&self, layer: usize, vector: ArrayView1<f64>) -> Result<f64> {
        let (h, base) = self
            .base
            .get(layer)
            .ok_or_else(|| Error::index(format!("layer {layer} of {}", self.base.len())))?;
        if vector.len() != h.len() {
            return Err(Error::input(format!(
                "vector has {} entries, model width is {}",
                vector.len(),
                h.len()
            )));
        }
        let x = h + &vector;
        Ok(target_log_prob(self.trace.model(), x.view(), self.target) - base)
    }

    pub fn head(&self, head: HeadId) -> Result<f64> {
        let o = self.trace.head_output(head)?;
        self.vector_increase(head.layer, o.view())
    }

    pub fn position(&self, head: HeadId, position: usize) -> Result<f64> {
        let c = self.trace.position_contribution(head, position)?;
        self.vector_increase(head.layer, c.view())
    }

    /// Per-position scores of one head, length `T`. Positions with zero
    /// attention score exactly 0 without a projection.
    pub fn positions(&self, head: HeadId) -> Result<Vec<f64>> {
        let contributions = self.trace.position_contributions(head)?;
        let alpha = self.trace.attention(head)?;
        contributions
            .outer_iter()
            .zip(alpha.iter())
            .map(|(c, &a)| {
                if a == 0.0 {
                    Ok(0.0)
                } else {
                    self.vector_increase(head.layer, c)
                }
            })
            .collect()
    }

    pub fn all_heads(&self) -> Result<HeadScores> {
        let t = self.trace;
        let mut values = Vec::with_capacity(t.n_layers() * t.n_heads());
        for head in t.heads() {
            values.push(self.head(head)?);
        }
        Ok(HeadScores {
            n_layers: t.n_layers(),
            n_heads: t.n_heads(),
            values,
        })
    }
}

fn target_log_prob(model: &Model, x: ArrayView1<f64>, target: TokenId) -> f64 {
    let logits = model.output_logits(x);
    let logits = logits.as_slice().expect("contiguous logits");
    logits[target as usize] - log_sum_exp(logits)
}

pub fn log_prob_increase(trace: &Trace, head: HeadId, target: TokenId) -> Result<f64> {
    Attributor::new(trace, target)?.head(head)
}

pub fn position_log_prob_increase(
    trace: &Trace,
    head: HeadId,
    target: TokenId,
    position: usize,
) -> Result<f64> {
    Attributor::new(trace, target)?.position(head, position)
}

/// Both forms of the two-token log-probability gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitMinus {
    /// `log p(b1) - log p(b2)`.
    pub log_prob: f64,
    /// `z_b1 - z_b2`.
    pub logit: f64,
}

impl LogitMinus {
    pub fn from_logits(logits: &[f64], b1: TokenId, b2: TokenId) -> Result<Self> {
        let get = |b: TokenId| {
            logits
                .get(b as usize)
                .copied()
                .ok_or_else(|| Error::index(format!("token {b} outside {} logits", logits.len())))
        };
        let (z1, z2) = (get(b1)?, get(b2)?);
        let lse = log_sum_exp(logits);
        Ok(Self {
            log_prob: (z1 - lse) - (z2 - lse),
            logit: z1 - z2,
        })
    }

    pub fn disagreement(&self) -> f64 {
        (self.log_prob - self.logit).abs()
    }
}

/// `log p(b1 | v) - log p(b2 | v)` for a residual-space vector, projected
/// through the final normalization and `E_u`.
pub fn logit_minus(
    model: &Model,
    vector: ArrayView1<f64>,
    b1: TokenId,
    b2: TokenId,
) -> Result<f64> {
    Ok(logit_minus_forms(model, vector, b1, b2)?.log_prob)
}

pub fn logit_minus_forms(
    model: &Model,
    vector: ArrayView1<f64>,
    b1: TokenId,
    b2: TokenId,
) -> Result<LogitMinus> {
    if vector.len() != model.config().d_model {
        return Err(Error::input(format!(
            "vector has {} entries, model width is {}",
            vector.len(),
            model.config().d_model
        )));
    }
    model.check_token(b1)?;
    model.check_token(b2)?;
    let logits = model.output_logits(vector);
    LogitMinus::from_logits(logits.as_slice().expect("contiguous logits"), b1, b2)
}

/// Head score matrix `S`, `[n_layers, n_heads]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
}

impl HeadScores {
    pub fn get(&self, head: HeadId) -> f64 {
        self.values[head.flat(self.n_heads)]
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.values.len()).map(|i| HeadId::from_flat(i, self.n_heads))
    }

    /// Heads by descending score, ties by ascending `(layer, head)`.
    pub fn ranked(&self) -> Vec<HeadId> {
        ranked_heads(&self.values, self.n_heads)
    }

    pub fn top_k(&self, k: usize) -> Vec<HeadId> {
        let mut r = self.ranked();
        r.truncate(k);
        r
    }
}

pub(crate) fn ranked_heads(values: &[f64], n_heads: usize) -> Vec<HeadId> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| desc_then_index(values[a], values[b], a, b));
    idx.into_iter()
        .map(|i| HeadId::from_flat(i, n_heads))
        .collect()
}

/// Which heads feed a patch heatmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSelection {
    TopK(usize),
    All,
    Explicit(Vec<HeadId>),
}

impl Default for HeadSelection {
    fn default() -> Self {
        Self::TopK(DEFAULT_TOP_K)
    }
}

impl HeadSelection {
    pub fn resolve(&self, scores: &HeadScores) -> Result<Vec<HeadId>> {
        match self {
            Self::TopK(0) => Err(Error::input("top-k must be at least 1")),
            Self::TopK(k) => Ok(scores.top_k(*k)),
            Self::All => Ok(scores.heads().collect()),
            Self::Explicit(heads) if heads.is_empty() => Err(Error::input("empty head list")),
            Self::Explicit(heads) => {
                for h in heads {
                    if h.layer >= scores.n_layers || h.head >= scores.n_heads {
                        return Err(Error::index(format!("head {h} outside the model")));
                    }
                }
                Ok(heads.clone())
            }
        }
    }
}

impl std::fmt::Display for HeadSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TopK(k) => write!(f, "top{k}"),
            Self::All => f.write_str("all"),
            Self::Explicit(heads) => {
                let labels: Vec<String> = heads.iter().map(HeadId::to_string).collect();
                write!(f, "heads:{}", labels.join(","))
            }
        }
    }
}

/// Accepts `all`, `topK` / `top-K` / `top:K`, or `heads:L_H,L_H,...`.
impl FromStr for HeadSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        if let Some(list) = s.strip_prefix("heads:") {
            let heads = list
                .split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| x.trim().parse())
                .collect::<Result<Vec<HeadId>>>()?;
            return Ok(Self::Explicit(heads));
        }
        if let Some(rest) = s.strip_prefix("top") {
            let k = rest.trim_start_matches(['-', ':']);
            return k
                .parse()
                .map(Self::TopK)
                .map_err(|_| Error::input(format!("bad head policy `{s}`")));
        }
        Err(Error::input(format!(
            "bad head policy `{s}` (expected all, topK, or heads:L_H,...)"
        )))
    }
}

impl Serialize for HeadSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attribution of one trace to one target token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    pub target: TokenId,
    pub scores: HeadScores,
    /// Clamped and normalized scores, same layout as `scores`.
    pub profile: Vec<f64>,
    pub top_heads: Vec<HeadId>,
    pub position_scores: BTreeMap<HeadId, Vec<f64>>,
}

impl AttributionResult {
    pub fn share(&self, head: HeadId) -> f64 {
        self.profile[head.flat(self.scores.n_heads)]
    }
}

/// Scores every head, keeps the top `k`, and scores every position of those.
/// A trace with no positive head gets an all-zero profile instead of an error.
pub fn attribute(trace: &Trace, target: TokenId, k: usize) -> Result<AttributionResult> {
    let attr = Attributor::new(trace, target)?;
    let scores = attr.all_heads()?;
    let top_heads = HeadSelection::TopK(k.max(1)).resolve(&scores)?;
    let profile =
        profile::normalize(&scores.values).unwrap_or_else(|| vec![0.0; scores.values.len()]);
    let mut position_scores = BTreeMap::new();
    for &h in &top_heads {
        position_scores.insert(h, attr.positions(h)?);
    }
    Ok(AttributionResult {
        target,
        scores,
        profile,
        top_heads,
        position_scores,
    })
}
