// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GridDims;

/// Half-open range of sequence positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn single(p: usize) -> Self {
        Self {
            start: p,
            end: p + 1,
        }
    }

    pub const fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub const fn contains(&self, p: usize) -> bool {
        self.start <= p && p < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualSpan {
    pub start: usize,
    pub grid: GridDims,
}

impl VisualSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.start + self.grid.cells())
    }
}

/// Role bookkeeping for sequence positions (0-based).
///
/// Visual positions map row-major onto the patch grid. Named `marks` record
/// positions of interest such as the color word of a textual context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    len: usize,
    visual: Option<VisualSpan>,
    question: Span,
    #[serde(default)]
    marks: BTreeMap<String, Span>,
}

impl PositionMap {
    pub fn new(len: usize, visual: Option<VisualSpan>, question: Span) -> Result<Self> {
        let map = Self {
            len,
            visual,
            question,
            marks: BTreeMap::new(),
        };
        map.validate()?;
        Ok(map)
    }

    /// Map for a plain text sequence whose question spans the whole input.
    pub fn text(len: usize) -> Self {
        Self {
            len,
            visual: None,
            question: Span::new(0, len),
            marks: BTreeMap::new(),
        }
    }

    pub fn with_mark(mut self, name: impl Into<String>, span: Span) -> Result<Self> {
        self.marks.insert(name.into(), span);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::input("position map over an empty sequence"));
        }
        let within = |name: &str, s: &Span| {
            if s.end > self.len || s.start > s.end {
                Err(Error::input(format!(
                    "{name} span {s:?} outside 0..{}",
                    self.len
                )))
            } else {
                Ok(())
            }
        };
        within("question", &self.question)?;
        if let Some(v) = &self.visual {
            let vs = v.span();
            within("visual", &vs)?;
            if vs.overlaps(&self.question) {
                return Err(Error::input("visual and question spans overlap"));
            }
        }
        for (name, s) in &self.marks {
            within(name, s)?;
            if let Some(v) = &self.visual {
                if v.span().overlaps(s) {
                    return Err(Error::input(format!(
                        "mark `{name}` overlaps the visual span"
                    )));
                }
            }
        }
        Ok(())
    }

    pub const fn len(&self) -> usize {
        self.len
    }

    pub const fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub const fn last(&self) -> usize {
        self.len - 1
    }

    pub fn visual(&self) -> Option<&VisualSpan> {
        self.visual.as_ref()
    }

    pub fn visual_span(&self) -> Option<Span> {
        self.visual.map(|v| v.span())
    }

    pub fn grid(&self) -> Option<GridDims> {
        self.visual.map(|v| v.grid)
    }

    pub fn question(&self) -> Span {
        self.question
    }

    pub fn marks(&self) -> &BTreeMap<String, Span> {
        &self.marks
    }

    pub fn mark(&self, name: &str) -> Option<Span> {
        self.marks.get(name).copied()
    }

    /// Grid cell `(row, col)` of a visual position.
    pub fn cell_of(&self, position: usize) -> Option<(usize, usize)> {
        let v = self.visual?;
        v.span().contains(position).then(|| {
            (
                (position - v.start) / v.grid.cols,
                (position - v.start) % v.grid.cols,
            )
        })
    }

    /// Sequence position of grid cell `(row, col)`.
    pub fn position_of(&self, row: usize, col: usize) -> Option<usize> {
        let v = self.visual?;
        (row < v.grid.rows && col < v.grid.cols).then(|| v.start + row * v.grid.cols + col)
    }
}
