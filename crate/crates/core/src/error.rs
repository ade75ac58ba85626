// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::fmt;

/// Coarse classification used by front ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or out-of-range caller input.
    Input,
    /// The model cannot provide what was asked (missing activations, unknown id).
    Model,
    /// Everything else.
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("run queue saturated: {pending} requests already waiting")]
    Saturated { pending: usize },

    #[error("no positively contributing heads")]
    NoPositiveHeads,

    #[error("format error: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl fmt::Display) -> Self {
        Self::Input(msg.to_string())
    }

    pub fn index(msg: impl fmt::Display) -> Self {
        Self::Index(msg.to_string())
    }

    pub fn shape(msg: impl fmt::Display) -> Self {
        Self::Shape(msg.to_string())
    }

    pub fn format(msg: impl fmt::Display) -> Self {
        Self::Format(msg.to_string())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Input(_) | Self::Index(_) | Self::Shape(_) | Self::NoPositiveHeads => {
                ErrorKind::Input
            }
            Self::Image(_) => ErrorKind::Input,
            Self::Capability(_) | Self::Format(_) => ErrorKind::Model,
            Self::Saturated { .. } | Self::Io(_) | Self::Json(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
