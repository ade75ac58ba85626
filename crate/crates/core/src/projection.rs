// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary projection of hidden vectors and rank statistics.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId, Vocabulary};
use crate::numeric::{desc_then_index, log_sum_exp};
use crate::trace::HeadId;

pub const DEFAULT_TOP_K: usize = 20;

/// Matrix a vector is projected through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Final normalization, then `E_u`.
    Unembedding,
    /// Raw `E`, no normalization.
    Embedding,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unembedding => "unembedding",
            Self::Embedding => "embedding",
        })
    }
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unembedding" | "unembed" => Ok(Self::Unembedding),
            "embedding" | "embed" => Ok(Self::Embedding),
            _ => Err(Error::input(format!("unknown projection space `{s}`"))),
        }
    }
}

/// Where a projected vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    HeadOutput {
        head: HeadId,
    },
    PositionContribution {
        head: HeadId,
        position: usize,
    },
    ValueOutput {
        head: HeadId,
        position: usize,
    },
    /// Residual stream entering `layer`; layer 0 is the embedding input.
    LayerInput {
        layer: usize,
        position: usize,
    },
    Vector,
}

/// A vocabulary ranking, descending by logit with ties by ascending id.
#[derive(Debug, Clone)]
pub struct TokenProjection {
    space: Space,
    source: Provenance,
    logits: Vec<f64>,
    log_z: f64,
    order: Vec<TokenId>,
    ranks: Vec<u32>,
}

impl TokenProjection {
    pub fn from_logits(logits: Vec<f64>, space: Space, source: Provenance) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::input("empty logit vector"));
        }
        if logits.iter().any(|z| z.is_nan()) {
            return Err(Error::input("NaN logit"));
        }
        let mut order: Vec<TokenId> = (0..logits.len() as TokenId).collect();
        order.sort_by(|&a, &b| {
            desc_then_index(
                logits[a as usize],
                logits[b as usize],
                a as usize,
                b as usize,
            )
        });
        let mut ranks = vec![0u32; logits.len()];
        for (r, &tok) in order.iter().enumerate() {
            ranks[tok as usize] = r as u32 + 1;
        }
        Ok(Self {
            space,
            source,
            log_z: log_sum_exp(&logits),
            logits,
            order,
            ranks,
        })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn source(&self) -> &Provenance {
        &self.source
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logit(&self, token: TokenId) -> f64 {
        self.logits[token as usize]
    }

    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.logits[token as usize] - self.log_z
    }

    pub fn probability(&self, token: TokenId) -> f64 {
        self.log_prob(token).exp()
    }

    /// Token ids from rank 1 downwards.
    pub fn order(&self) -> &[TokenId] {
        &self.order
    }

    /// 1-based rank of one token.
    pub fn rank(&self, token: TokenId) -> Result<usize> {
        self.ranks
            .get(token as usize)
            .map(|&r| r as usize)
            .ok_or_else(|| Error::index(format!("token {token} outside the vocabulary")))
    }

    pub fn top_k(&self, k: usize, vocab: &Vocabulary) -> Vec<RankedToken> {
        self.order
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &id)| RankedToken {
                rank: i + 1,
                id,
                token: vocab.token(id).unwrap_or("").to_owned(),
                logit: self.logit(id),
                probability: self.probability(id),
            })
            .collect()
    }

    pub fn slice(&self, k: usize, vocab: &Vocabulary) -> ProjectionSlice {
        ProjectionSlice {
            space: self.space,
            source: self.source.clone(),
            tokens: self.top_k(k, vocab),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub rank: usize,
    pub id: TokenId,
    pub token: String,
    pub logit: f64,
    pub probability: f64,
}

/// Serializable top-k view of a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSlice {
    pub space: Space,
    pub source: Provenance,
    pub tokens: Vec<RankedToken>,
}

/// Raw logits of `vector` in `space`.
pub fn projection_logits(model: &Model, vector: ArrayView1<f64>, space: Space) -> Result<Vec<f64>> {
    let d = model.config().d_model;
    if vector.len() != d {
        return Err(Error::input(format!(
            "vector has {} entries, model width is {d}",
            vector.len()
        )));
    }
    let logits = match space {
        Space::Unembedding => model.output_logits(vector),
        Space::Embedding => model.embedding_f64().dot(&vector),
    };
    Ok(logits.to_vec())
}

pub fn project(
    model: &Model,
    vector: ArrayView1<f64>,
    space: Space,
    source: Provenance,
) -> Result<TokenProjection> {
    TokenProjection::from_logits(projection_logits(model, vector, space)?, space, source)
}

/// The token ids that count as a hit for one surface word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTarget {
    pub word: String,
    pub ids: BTreeSet<TokenId>,
}

impl TokenTarget {
    /// First token of each spacing and casing variant of `word` that the
    /// vocabulary knows verbatim.
    pub fn new(vocab: &Vocabulary, word: &str) -> Result<Self> {
        let word = word.trim();
        let mut ids = BTreeSet::new();
        for variant in surface_variants(word) {
            if let Some(first) = Vocabulary::split(&variant).first() {
                if let Some(id) = vocab.id(first) {
                    ids.insert(id);
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::input(format!(
                "`{word}` has no token in the vocabulary"
            )));
        }
        Ok(Self {
            word: word.to_owned(),
            ids,
        })
    }

    pub fn from_ids(
        word: impl Into<String>,
        ids: impl IntoIterator<Item = TokenId>,
    ) -> Result<Self> {
        let ids: BTreeSet<TokenId> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(Error::input("token target with no accepted ids"));
        }
        Ok(Self {
            word: word.into(),
            ids,
        })
    }
}

fn surface_variants(word: &str) -> Vec<String> {
    let mut cap = String::new();
    let mut chars = word.chars();
    if let Some(c) = chars.next() {
        cap.extend(c.to_uppercase());
        cap.push_str(chars.as_str());
    }
    let lower = word.to_lowercase();
    let mut out = Vec::new();
    for w in [word.to_owned(), lower, cap] {
        out.push(format!(" {w}"));
        out.push(w);
    }
    out
}

/// Best (smallest) rank over the target's accepted ids.
pub fn rank_of(projection: &TokenProjection, target: &TokenTarget) -> Result<usize> {
    let mut best = usize::MAX;
    for &id in &target.ids {
        best = best.min(projection.rank(id)?);
    }
    if best == usize::MAX {
        return Err(Error::input("token target with no accepted ids"));
    }
    Ok(best)
}

/// Mean of `1 / rank` over projections.
pub fn mrr(projections: &[TokenProjection], target: &TokenTarget) -> Result<f64> {
    let ranks = projections
        .iter()
        .map(|p| rank_of(p, target))
        .collect::<Result<Vec<_>>>()?;
    mrr_of_ranks(&ranks)
}

pub fn mrr_of_ranks(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::input("MRR over no projections"));
    }
    if ranks.contains(&0) {
        return Err(Error::input("ranks are 1-based"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}
