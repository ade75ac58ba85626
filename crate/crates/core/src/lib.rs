// SPDX-License-Identifier: MIT OR Apache-2.0

//! # patchlens-core
//!
//! Single-pass attribution for decoder-only transformers, including models
//! that prepend projected image-patch embeddings to a text prompt.
//!
//! One instrumented forward pass ([`ModelHandle::run_traced`]) captures the
//! residual streams and the last position's attention rows. Everything else
//! is computed from that [`Trace`] without touching the model again:
//!
//! - per-head and per-position log-probability increases of a target token
//!   ([`attribution`]),
//! - vocabulary projections of hidden vectors and reciprocal-rank statistics
//!   ([`projection`]),
//! - patch-grid score maps and heatmap overlays ([`mm`]),
//! - the textual/visual color-question evidence pipelines ([`experiments`]).

pub mod analysis;
pub mod attribution;
pub mod error;
pub mod experiments;
pub mod mm;
pub mod model;
pub mod numeric;
pub mod projection;
pub mod toy;
pub mod trace;

pub use error::{Error, ErrorKind, Result};
pub use model::{Model, ModelConfig, ModelHandle, ModelInput, TokenId};
pub use trace::{CaptureOptions, HeadId, PositionMap, Trace};
