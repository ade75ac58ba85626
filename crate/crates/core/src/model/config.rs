// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    None,
    Learned { max_positions: usize },
    Rotary { theta: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// Attention-only blocks; the FFN output is identically zero.
    None,
    Gelu,
    SwiGlu,
}

/// Patch grid of the vision front end, `rows * cols` visual positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Vision front-end settings: the patch grid and the pixel size the image is
/// cropped to before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub grid: GridDims,
    pub patch_size: u32,
}

impl VisionConfig {
    pub const fn image_size(&self) -> (u32, u32) {
        (
            self.grid.cols as u32 * self.patch_size,
            self.grid.rows as u32 * self.patch_size,
        )
    }
}

/// Architecture description. `n_layers` counts every block, i.e. `L + 1` for
/// layers numbered `0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub norm: NormKind,
    pub norm_eps: f32,
    pub positional: Positional,
    pub ffn: FfnKind,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default)]
    pub out_bias: bool,
    #[serde(default)]
    pub ffn_bias: bool,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub vision: Option<VisionConfig>,
    /// False for backends that only expose final logits (fused kernels,
    /// quantized runtimes); such models cannot be traced.
    #[serde(default = "default_true")]
    pub exposes_activations: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::input(format!(
                "model config `{}`: {msg}",
                self.model_id
            )))
        };
        if self.n_layers == 0 {
            return fail("needs at least one layer");
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("needs at least one head");
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail("n_heads must be a multiple of n_kv_heads");
        }
        if self.d_model == 0 || self.head_dim == 0 || self.vocab_size == 0 {
            return fail("zero-sized dimension");
        }
        if let Positional::Rotary { .. } = self.positional {
            if !self.head_dim.is_multiple_of(2) {
                return fail("rotary embeddings need an even head_dim");
            }
        }
        if self.ffn != FfnKind::None && self.d_ff == 0 {
            return fail("d_ff must be positive when an FFN is present");
        }
        Ok(())
    }

    /// Number of query heads sharing one key/value head.
    pub const fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub const fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn max_positions(&self) -> Option<usize> {
        match self.positional {
            Positional::Learned { max_positions } => Some(max_positions),
            _ => None,
        }
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Public configuration of the 7B multimodal reference checkpoint
    /// (Vicuna-7B decoder, CLIP ViT-L/14 at 336px).
    pub fn reference_llava_7b() -> Self {
        Self {
            model_id: "llava-1.5-7b".into(),
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 32,
            d_model: 4096,
            head_dim: 128,
            d_ff: 11008,
            vocab_size: 32000,
            norm: NormKind::RmsNorm,
            norm_eps: 1e-5,
            positional: Positional::Rotary { theta: 10_000.0 },
            ffn: FfnKind::SwiGlu,
            qkv_bias: false,
            out_bias: false,
            ffn_bias: false,
            tied_embeddings: false,
            vision: Some(VisionConfig {
                grid: GridDims::new(24, 24),
                patch_size: 14,
            }),
            exposes_activations: true,
        }
    }
}
