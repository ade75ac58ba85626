// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{top_head_overlap, HeadProfile};
use crate::error::{Error, Result};
use crate::trace::HeadId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub a: String,
    pub b: String,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareDelta {
    pub a: String,
    pub b: String,
    pub head: HeadId,
    /// Share in `a` and `b`, in percent.
    pub share_a: f64,
    pub share_b: f64,
    /// `share_b - share_a`, in percentage points.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedShare {
    pub head: HeadId,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub k: usize,
    pub overlaps: Vec<PairOverlap>,
    /// Per pair, every head in either top-`k` set, by descending |delta|.
    pub deltas: Vec<ShareDelta>,
    pub top: BTreeMap<String, Vec<RankedShare>>,
}

/// Pairwise top-`k` overlaps and share shifts between tagged profiles.
pub fn compare_models(
    profiles: &BTreeMap<String, HeadProfile>,
    k: usize,
) -> Result<ModelComparison> {
    if profiles.len() < 2 {
        return Err(Error::input("comparison needs at least two profiles"));
    }
    let tags: Vec<&String> = profiles.keys().collect();
    let mut overlaps = Vec::new();
    let mut deltas = Vec::new();
    for (i, a) in tags.iter().enumerate() {
        for b in &tags[i + 1..] {
            let (pa, pb) = (&profiles[*a], &profiles[*b]);
            overlaps.push(PairOverlap {
                a: a.to_string(),
                b: b.to_string(),
                overlap: top_head_overlap(pa, pb, k)?,
            });
            let mut heads: Vec<HeadId> = pa.top_k(k);
            for h in pb.top_k(k) {
                if !heads.contains(&h) {
                    heads.push(h);
                }
            }
            let mut pair: Vec<ShareDelta> = heads
                .into_iter()
                .map(|head| {
                    let (sa, sb) = (100.0 * pa.share(head), 100.0 * pb.share(head));
                    ShareDelta {
                        a: a.to_string(),
                        b: b.to_string(),
                        head,
                        share_a: sa,
                        share_b: sb,
                        delta: sb - sa,
                    }
                })
                .collect();
            pair.sort_by(|x, y| {
                y.delta
                    .abs()
                    .total_cmp(&x.delta.abs())
                    .then(x.head.cmp(&y.head))
            });
            deltas.extend(pair);
        }
    }
    let top = profiles
        .iter()
        .map(|(tag, p)| {
            let list = p
                .top_k(k)
                .into_iter()
                .map(|head| RankedShare {
                    head,
                    share: p.share(head),
                })
                .collect();
            (tag.clone(), list)
        })
        .collect();
    Ok(ModelComparison {
        k,
        overlaps,
        deltas,
        top,
    })
}
