// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference forward pass with optional activation capture.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};

use super::config::Positional;
use super::vocab::TokenId;
use super::weights::{AttentionWeights, FfnWeights, LayerWeights};
use super::Model;
use crate::error::{Error, Result};
use crate::numeric::{gelu_tanh, silu, softmax_in_place};

/// Pre-computed embeddings occupying `start .. start + rows` of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualBlock {
    pub start: usize,
    pub embeddings: Array2<f32>,
}

impl VisualBlock {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.embeddings.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<TokenId>,
    pub visual: Option<VisualBlock>,
}

impl ModelInput {
    pub fn text(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            visual: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if self.tokens.is_empty() {
            return Err(Error::input("empty input sequence"));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(max) = cfg.max_positions() {
            if self.tokens.len() > max {
                return Err(Error::input(format!(
                    "sequence of {} tokens exceeds the context budget of {max}",
                    self.tokens.len()
                )));
            }
        }
        if let Some(v) = &self.visual {
            if v.embeddings.ncols() != cfg.d_model {
                return Err(Error::shape(format!(
                    "visual block width {} does not match hidden size {}",
                    v.embeddings.ncols(),
                    cfg.d_model
                )));
            }
            if v.span().end > self.tokens.len() {
                return Err(Error::shape(format!(
                    "visual block {:?} runs past the sequence end {}",
                    v.span(),
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CaptureSpec {
    pub full_attention: bool,
    pub cache_values: bool,
}

/// Raw activations produced by one captured pass.
pub(crate) struct Captured {
    pub residual: Array3<f32>,
    pub attn_last: Array3<f32>,
    pub attn_full: Option<Array4<f32>>,
    pub attn_out_last: Array2<f32>,
    pub ffn_out_last: Array2<f32>,
    pub values: Option<Array4<f32>>,
}

pub(crate) fn embed_input(model: &Model, input: &ModelInput) -> Array2<f32> {
    let w = model.weights();
    let t = input.tokens.len();
    let mut x = Array2::zeros((t, model.config().d_model));
    for (p, &tok) in input.tokens.iter().enumerate() {
        x.row_mut(p).assign(&w.embed.row(tok as usize));
    }
    if let Some(v) = &input.visual {
        x.slice_mut(s![v.span(), ..]).assign(&v.embeddings);
    }
    if let Some(pe) = &w.pos_embed {
        x += &pe.slice(s![..t, ..]);
    }
    x
}

fn linear(x: ArrayView2<f32>, w: &Array2<f32>, b: Option<&Array1<f32>>) -> Array2<f32> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += b;
    }
    y
}

fn apply_rotary(x: &mut Array2<f32>, n_heads: usize, head_dim: usize, theta: f32) {
    let half = head_dim / 2;
    for (pos, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        for h in 0..n_heads {
            let base = h * head_dim;
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f32 / head_dim as f32);
                let (sin, cos) = (pos as f32 * freq).sin_cos();
                let a = row[base + i];
                let b = row[base + i + half];
                row[base + i] = a * cos - b * sin;
                row[base + i + half] = a * sin + b * cos;
            }
        }
    }
}

struct AttentionPass {
    out: Array2<f32>,
    /// `[H, T, T]` post-softmax weights, zero above the diagonal.
    probs: Array3<f32>,
    /// `[H_kv, T, hd]` value vectors (bias included).
    values: Array3<f32>,
}

fn attention(model: &Model, w: &AttentionWeights, a: ArrayView2<f32>) -> AttentionPass {
    let cfg = model.config();
    let (t, hd, h, hkv) = (a.nrows(), cfg.head_dim, cfg.n_heads, cfg.n_kv_heads);
    let mut q = linear(a, &w.wq, w.bq.as_ref());
    let mut k = linear(a, &w.wk, w.bk.as_ref());
    let v = linear(a, &w.wv, w.bv.as_ref());
    if let Positional::Rotary { theta } = cfg.positional {
        apply_rotary(&mut q, h, hd, theta);
        apply_rotary(&mut k, hkv, hd, theta);
    }
    let scale = 1.0 / (hd as f32).sqrt();
    let mut probs = Array3::zeros((h, t, t));
    let mut mixed = Array2::zeros((t, h * hd));
    for head in 0..h {
        let g = cfg.kv_head_of(head);
        let qh = q.slice(s![.., head * hd..(head + 1) * hd]);
        let kh = k.slice(s![.., g * hd..(g + 1) * hd]);
        let vh = v.slice(s![.., g * hd..(g + 1) * hd]);
        let scores = qh.dot(&kh.t());
        for i in 0..t {
            let mut row: Vec<f32> = (0..=i).map(|j| scores[[i, j]] * scale).collect();
            softmax_in_place(&mut row);
            for (j, p) in row.into_iter().enumerate() {
                probs[[head, i, j]] = p;
            }
        }
        let ph = probs.index_axis(Axis(0), head);
        mixed
            .slice_mut(s![.., head * hd..(head + 1) * hd])
            .assign(&ph.dot(&vh));
    }
    let out = linear(mixed.view(), &w.wo, w.bo.as_ref());
    let values = v
        .into_shape_with_order((t, hkv, hd))
        .expect("contiguous value projection")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned();
    AttentionPass { out, probs, values }
}

fn ffn(layer: &LayerWeights, x: ArrayView2<f32>) -> Option<Array2<f32>> {
    let norm = layer.ffn_norm.as_ref()?;
    let a = norm.apply_rows(x);
    match &layer.ffn {
        FfnWeights::None => None,
        FfnWeights::Gelu {
            w_in,
            b_in,
            w_out,
            b_out,
        } => {
            let hidden = linear(a.view(), w_in, b_in.as_ref()).mapv(gelu_tanh);
            Some(linear(hidden.view(), w_out, b_out.as_ref()))
        }
        FfnWeights::SwiGlu { gate, up, down } => {
            let g = linear(a.view(), gate, None).mapv(silu);
            let u = linear(a.view(), up, None);
            Some(linear((g * u).view(), down, None))
        }
    }
}

/// Runs the decoder over `input` and returns last-position logits, plus the
/// captured activations when `capture` is set.
pub(crate) fn forward(
    model: &Model,
    input: &ModelInput,
    capture: Option<CaptureSpec>,
) -> (Array1<f32>, Option<Captured>) {
    let cfg = model.config();
    let (t, d, n_layers, h, hd) = (
        input.len(),
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.head_dim,
    );
    let mut x = embed_input(model, input);
    let mut cap = capture.map(|spec| Captured {
        residual: Array3::zeros((n_layers + 1, t, d)),
        attn_last: Array3::zeros((n_layers, h, t)),
        attn_full: spec
            .full_attention
            .then(|| Array4::zeros((n_layers, h, t, t))),
        attn_out_last: Array2::zeros((n_layers, d)),
        ffn_out_last: Array2::zeros((n_layers, d)),
        values: spec
            .cache_values
            .then(|| Array4::zeros((n_layers, h, t, hd))),
    });
    for (l, layer) in model.weights().layers.iter().enumerate() {
        if let Some(c) = cap.as_mut() {
            c.residual.index_axis_mut(Axis(0), l).assign(&x);
        }
        let a = layer.attn_norm.apply_rows(x.view());
        let pass = attention(model, &layer.attn, a.view());
        x += &pass.out;
        let f = ffn(layer, x.view());
        if let Some(f) = &f {
            x += f;
        }
        if let Some(c) = cap.as_mut() {
            c.attn_last
                .index_axis_mut(Axis(0), l)
                .assign(&pass.probs.slice(s![.., t - 1, ..]));
            if let Some(full) = c.attn_full.as_mut() {
                full.index_axis_mut(Axis(0), l).assign(&pass.probs);
            }
            c.attn_out_last.row_mut(l).assign(&pass.out.row(t - 1));
            if let Some(f) = &f {
                c.ffn_out_last.row_mut(l).assign(&f.row(t - 1));
            }
            if let Some(values) = c.values.as_mut() {
                for head in 0..h {
                    let g = cfg.kv_head_of(head);
                    values
                        .slice_mut(s![l, head, .., ..])
                        .assign(&pass.values.index_axis(Axis(0), g));
                }
            }
        }
    }
    if let Some(c) = cap.as_mut() {
        c.residual.index_axis_mut(Axis(0), n_layers).assign(&x);
    }
    let last = model.weights().final_norm.apply(x.row(t - 1));
    let logits = model.weights().unembedding().dot(&last);
    (logits, cap)
}
