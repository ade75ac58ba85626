// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// `(layer, head)` coordinate, displayed as `layer_head` (e.g. `19_6`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    /// Row-major index into a `[n_layers, n_heads]` table.
    pub const fn flat(&self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }

    pub const fn from_flat(index: usize, n_heads: usize) -> Self {
        Self::new(index / n_heads, index % n_heads)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (l, h) = s
            .split_once('_')
            .ok_or_else(|| Error::input(format!("head label `{s}` is not `layer_head`")))?;
        let parse = |x: &str| {
            x.parse::<usize>()
                .map_err(|_| Error::input(format!("head label `{s}` is not `layer_head`")))
        };
        Ok(Self::new(parse(l)?, parse(h)?))
    }
}

impl Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
