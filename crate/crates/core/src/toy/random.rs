// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random models for tests and demos.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{
    AttentionWeights, FfnKind, FfnWeights, GridDims, LayerWeights, Model, ModelConfig,
    ModelWeights, Norm, NormKind, Positional, VisionConfig, Vocabulary,
};

/// The standard toy architecture: 2 layers, 4 heads, `d = 32`, 100 tokens,
/// rotary positions and a SwiGLU FFN.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        model_id: "toy-tiny".into(),
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 4,
        d_model: 32,
        head_dim: 8,
        d_ff: 64,
        vocab_size: 100,
        norm: NormKind::RmsNorm,
        norm_eps: 1e-6,
        positional: Positional::Rotary { theta: 10_000.0 },
        ffn: FfnKind::SwiGlu,
        qkv_bias: false,
        out_bias: false,
        ffn_bias: false,
        tied_embeddings: false,
        vision: None,
        exposes_activations: true,
    }
}

/// Variant exercising every optional architectural feature: grouped KV heads,
/// biases, LayerNorm, GELU MLP, learned positions and tied embeddings.
pub fn tiny_config_variant() -> ModelConfig {
    ModelConfig {
        model_id: "toy-tiny-variant".into(),
        n_kv_heads: 2,
        norm: NormKind::LayerNorm,
        norm_eps: 1e-5,
        positional: Positional::Learned { max_positions: 64 },
        ffn: FfnKind::Gelu,
        qkv_bias: true,
        out_bias: true,
        ffn_bias: true,
        tied_embeddings: true,
        ..tiny_config()
    }
}

/// Toy multimodal configuration with a visual patch grid.
pub fn tiny_vision_config(grid: GridDims) -> ModelConfig {
    ModelConfig {
        model_id: format!("toy-vision-{}x{}", grid.rows, grid.cols),
        vision: Some(VisionConfig {
            grid,
            patch_size: 14,
        }),
        ..tiny_config()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, std: f32) -> Array2<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng))
    }

    fn vector(&mut self, n: usize, mean: f32, std: f32) -> Array1<f32> {
        let dist = Normal::new(mean, std).expect("positive std");
        Array1::from_shape_simple_fn(n, || dist.sample(&mut self.rng))
    }

    fn norm(&mut self, cfg: &ModelConfig) -> Norm {
        let d = cfg.d_model;
        Norm {
            kind: cfg.norm,
            weight: self.vector(d, 1.0, 0.1),
            bias: (cfg.norm == NormKind::LayerNorm).then(|| self.vector(d, 0.0, 0.05)),
            eps: cfg.norm_eps,
        }
    }

    fn bias(&mut self, on: bool, n: usize) -> Option<Array1<f32>> {
        on.then(|| self.vector(n, 0.0, 0.1))
    }
}

/// Gaussian-initialized weights for `config`, vocabulary `<bos> <eos> <unk> <img> t4 ...`.
pub fn random_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let cfg = &config;
    let (d, hd, b) = (cfg.d_model, cfg.head_dim, cfg.vocab_size);
    let in_std = 1.0 / (d as f32).sqrt();
    let embed = init.matrix(b, d, 1.0);
    let pos_embed = match cfg.positional {
        Positional::Learned { max_positions } => Some(init.matrix(max_positions, d, 0.3)),
        _ => None,
    };
    let layers = (0..cfg.n_layers)
        .map(|_| {
            let attn_norm = init.norm(cfg);
            let attn = AttentionWeights {
                wq: init.matrix(cfg.n_heads * hd, d, in_std * 2.0),
                wk: init.matrix(cfg.n_kv_heads * hd, d, in_std * 2.0),
                wv: init.matrix(cfg.n_kv_heads * hd, d, in_std),
                wo: init.matrix(
                    d,
                    cfg.n_heads * hd,
                    1.0 / ((cfg.n_heads * hd) as f32).sqrt(),
                ),
                bq: init.bias(cfg.qkv_bias, cfg.n_heads * hd),
                bk: init.bias(cfg.qkv_bias, cfg.n_kv_heads * hd),
                bv: init.bias(cfg.qkv_bias, cfg.n_kv_heads * hd),
                bo: init.bias(cfg.out_bias, d),
            };
            let ff_std = 1.0 / (cfg.d_ff.max(1) as f32).sqrt();
            let (ffn_norm, ffn) = match cfg.ffn {
                FfnKind::None => (None, FfnWeights::None),
                FfnKind::Gelu => (
                    Some(init.norm(cfg)),
                    FfnWeights::Gelu {
                        w_in: init.matrix(cfg.d_ff, d, in_std),
                        b_in: init.bias(cfg.ffn_bias, cfg.d_ff),
                        w_out: init.matrix(d, cfg.d_ff, ff_std),
                        b_out: init.bias(cfg.ffn_bias, d),
                    },
                ),
                FfnKind::SwiGlu => (
                    Some(init.norm(cfg)),
                    FfnWeights::SwiGlu {
                        gate: init.matrix(cfg.d_ff, d, in_std),
                        up: init.matrix(cfg.d_ff, d, in_std),
                        down: init.matrix(d, cfg.d_ff, ff_std),
                    },
                ),
            };
            LayerWeights {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            }
        })
        .collect();
    let final_norm = init.norm(cfg);
    let unembed = (!cfg.tied_embeddings).then(|| init.matrix(b, d, 1.0));
    let weights = ModelWeights {
        embed,
        pos_embed,
        layers,
        final_norm,
        unembed,
    };
    Model::new(config.clone(), Vocabulary::numbered(b), weights)
}
