// SPDX-License-Identifier: MIT OR Apache-2.0

//! `trace-format-v1`: a trace serialized into the crate's tar container.
//!
//! Metadata fields: `model_id`, `seq_len`, `n_layers`, `n_heads`, `d_model`,
//! `head_dim`, `tokens`, `position_map`, `options`.
//!
//! Arrays (`L = n_layers`, `T = seq_len`):
//!
//! | name            | shape              |
//! |-----------------|--------------------|
//! | `residual`      | `[L + 1, T, d]`    |
//! | `attn_last`     | `[L, H, T]`        |
//! | `attn_out_last` | `[L, d]`           |
//! | `ffn_out_last`  | `[L, d]`           |
//! | `logits`        | `[vocab]`          |
//! | `attn_full`     | `[L, H, T, T]` (only with full capture) |
//! | `values`        | `[L, H, T, hd]` (only with the value cache) |

use std::sync::Arc;

use ndarray::{ArrayD, Dimension};
use serde::{Deserialize, Serialize};

use super::{CaptureOptions, PositionMap, Trace};
use crate::error::{Error, Result};
use crate::model::{Archive, Model, TokenId};

pub const TRACE_FORMAT: &str = "trace-format-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    model_id: String,
    seq_len: usize,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    head_dim: usize,
    tokens: Vec<TokenId>,
    position_map: PositionMap,
    options: CaptureOptions,
}

fn take<D: Dimension>(
    archive: &mut Archive,
    name: &str,
    shape: &[usize],
) -> Result<ndarray::Array<f32, D>> {
    let a: ArrayD<f32> = archive
        .arrays
        .remove(name)
        .ok_or_else(|| Error::format(format!("trace archive lacks `{name}`")))?;
    if a.shape() != shape {
        return Err(Error::format(format!(
            "trace array `{name}` has shape {:?}, expected {shape:?}",
            a.shape()
        )));
    }
    a.into_dimensionality()
        .map_err(|_| Error::format(format!("trace array `{name}` has the wrong rank")))
}

impl Trace {
    pub fn to_archive(&self) -> Archive {
        let cfg = self.model.config();
        let meta = TraceMeta {
            model_id: cfg.model_id.clone(),
            seq_len: self.seq_len(),
            n_layers: self.n_layers(),
            n_heads: self.n_heads(),
            d_model: self.d_model(),
            head_dim: cfg.head_dim,
            tokens: self.tokens.clone(),
            position_map: self.position_map.clone(),
            options: self.options,
        };
        let mut archive = Archive::new(
            TRACE_FORMAT,
            serde_json::to_value(meta).expect("trace metadata serializes"),
        );
        archive.insert("residual", self.residual.clone().into_dyn());
        archive.insert("attn_last", self.attn_last.clone().into_dyn());
        archive.insert("attn_out_last", self.attn_out_last.clone().into_dyn());
        archive.insert("ffn_out_last", self.ffn_out_last.clone().into_dyn());
        archive.insert("logits", self.logits.clone().into_dyn());
        if let Some(a) = &self.attn_full {
            archive.insert("attn_full", a.clone().into_dyn());
        }
        if let Some(v) = &self.values {
            archive.insert("values", v.clone().into_dyn());
        }
        archive
    }

    /// Rebuilds a trace captured on `model`. Value-output recomputation needs
    /// the original weights, so the model id and dimensions must match.
    pub fn from_archive(mut archive: Archive, model: Arc<Model>) -> Result<Self> {
        if archive.format != TRACE_FORMAT {
            return Err(Error::format(format!("not a {TRACE_FORMAT} archive")));
        }
        let meta: TraceMeta = serde_json::from_value(archive.metadata.clone())?;
        let cfg = model.config();
        if meta.model_id != cfg.model_id
            || meta.n_layers != cfg.n_layers
            || meta.n_heads != cfg.n_heads
            || meta.d_model != cfg.d_model
            || meta.head_dim != cfg.head_dim
        {
            return Err(Error::input(format!(
                "trace was captured on `{}`, not on `{}`",
                meta.model_id, cfg.model_id
            )));
        }
        meta.position_map.validate()?;
        let (l, h, t, d) = (meta.n_layers, meta.n_heads, meta.seq_len, meta.d_model);
        if meta.tokens.len() != t || meta.position_map.len() != t {
            return Err(Error::format(
                "trace metadata disagrees on the sequence length",
            ));
        }
        let residual = take(&mut archive, "residual", &[l + 1, t, d])?;
        let attn_last = take(&mut archive, "attn_last", &[l, h, t])?;
        let attn_out_last = take(&mut archive, "attn_out_last", &[l, d])?;
        let ffn_out_last = take(&mut archive, "ffn_out_last", &[l, d])?;
        let logits = take(&mut archive, "logits", &[cfg.vocab_size])?;
        let attn_full = if meta.options.full_attention {
            Some(take(&mut archive, "attn_full", &[l, h, t, t])?)
        } else {
            None
        };
        let values = if meta.options.cache_values {
            Some(take(&mut archive, "values", &[l, h, t, meta.head_dim])?)
        } else {
            None
        };
        Ok(Self {
            model,
            tokens: meta.tokens,
            position_map: meta.position_map,
            options: meta.options,
            residual,
            attn_last,
            attn_full,
            attn_out_last,
            ffn_out_last,
            values,
            logits,
        })
    }

    pub fn export(&self, writer: impl std::io::Write) -> Result<()> {
        self.to_archive().write_to(writer)
    }

    pub fn import(reader: impl std::io::Read, model: Arc<Model>) -> Result<Self> {
        Self::from_archive(Archive::read_from(reader, TRACE_FORMAT)?, model)
    }
}
