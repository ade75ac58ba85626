// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straight-line reference computations written with explicit loops over the
//! raw weights. They share nothing with the library's ndarray code paths
//! beyond reading weights and captured layer inputs.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use patchlens_core::model::{FfnWeights, Model, Norm, NormKind, Positional};
use patchlens_core::{HeadId, Trace};

pub fn norm_loop(norm: &Norm, x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = match norm.kind {
        NormKind::RmsNorm => 0.0,
        NormKind::LayerNorm => x.iter().sum::<f64>() / d,
    };
    let mut ms = 0.0;
    for v in x {
        ms += (v - mean) * (v - mean);
    }
    ms /= d;
    let scale = 1.0 / (ms + norm.eps as f64).sqrt();
    (0..x.len())
        .map(|i| {
            let b = norm.bias.as_ref().map_or(0.0, |b| b[i] as f64);
            (x[i] - mean) * scale * norm.weight[i] as f64 + b
        })
        .collect()
}

fn row_dot(w: &ndarray::Array2<f32>, row: usize, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (k, xv) in x.iter().enumerate() {
        acc += w[[row, k]] as f64 * xv;
    }
    acc
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let hd = v.len();
    let half = hd / 2;
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / hd as f64);
        let ang = pos as f64 * freq;
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * ang.cos() - b * ang.sin();
        v[i + half] = a * ang.sin() + b * ang.cos();
    }
}

pub struct LayerOracle {
    /// attention weights of the last query per head
    pub alpha: Vec<Vec<f64>>,
    /// unweighted value-output vectors per head per position (bias share included)
    pub value_out: Vec<Vec<Vec<f64>>>,
}

/// Recomputes attention at `layer` for the last query from the captured layer
/// inputs, entirely in loops.
pub fn layer_oracle(trace: &Trace, layer: usize) -> LayerOracle {
    let model = trace.model();
    let cfg = model.config();
    let w = &model.weights().layers[layer];
    let t = trace.seq_len();
    let hd = cfg.head_dim;
    let input = trace.layer_input(layer).unwrap();
    let normed: Vec<Vec<f64>> = (0..t)
        .map(|p| {
            let x: Vec<f64> = input.row(p).iter().map(|&v| v as f64).collect();
            norm_loop(&w.attn_norm, &x)
        })
        .collect();
    let proj = |m: &ndarray::Array2<f32>,
                b: &Option<ndarray::Array1<f32>>,
                row0: usize,
                x: &[f64]|
     -> Vec<f64> {
        (0..hd)
            .map(|i| row_dot(m, row0 + i, x) + b.as_ref().map_or(0.0, |b| b[row0 + i] as f64))
            .collect()
    };
    let mut alpha = Vec::new();
    let mut value_out = Vec::new();
    for j in 0..cfg.n_heads {
        let g = j / (cfg.n_heads / cfg.n_kv_heads);
        let mut q = proj(&w.attn.wq, &w.attn.bq, j * hd, &normed[t - 1]);
        if let Positional::Rotary { theta } = cfg.positional {
            rotate(&mut q, t - 1, theta as f64);
        }
        let mut scores = Vec::with_capacity(t);
        for p in 0..t {
            let mut k = proj(&w.attn.wk, &w.attn.bk, g * hd, &normed[p]);
            if let Positional::Rotary { theta } = cfg.positional {
                rotate(&mut k, p, theta as f64);
            }
            let mut s = 0.0;
            for i in 0..hd {
                s += q[i] * k[i];
            }
            scores.push(s / (hd as f64).sqrt());
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        alpha.push(exps.iter().map(|e| e / z).collect());
        let mut outs = Vec::with_capacity(t);
        for p in 0..t {
            let v = proj(&w.attn.wv, &w.attn.bv, g * hd, &normed[p]);
            let mut o = vec![0.0; cfg.d_model];
            for (r, slot) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..hd {
                    acc += w.attn.wo[[r, j * hd + i]] as f64 * v[i];
                }
                if let Some(bo) = &w.attn.bo {
                    acc += bo[r] as f64 / cfg.n_heads as f64;
                }
                *slot = acc;
            }
            outs.push(o);
        }
        value_out.push(outs);
    }
    LayerOracle { alpha, value_out }
}

/// Captured attention of `head` at the last query. Attribution is defined on
/// the captured pass, so the S oracles take these weights as given.
pub fn captured_alpha(trace: &Trace, head: HeadId) -> Vec<f64> {
    trace
        .attention(head)
        .unwrap()
        .iter()
        .map(|&a| a as f64)
        .collect()
}

/// Largest gap between captured attention and the loop recomputation.
pub fn alpha_recompute_gap(trace: &Trace) -> f64 {
    let mut worst = 0.0f64;
    for layer in 0..trace.n_layers() {
        let o = layer_oracle(trace, layer);
        for (j, row) in o.alpha.iter().enumerate() {
            let cap = captured_alpha(trace, HeadId::new(layer, j));
            worst = worst.max(max_abs_diff(row, &cap));
        }
    }
    worst
}

pub fn head_output_oracle(trace: &Trace, head: HeadId) -> Vec<f64> {
    let o = layer_oracle(trace, head.layer);
    let alpha = captured_alpha(trace, head);
    let d = trace.d_model();
    let mut out = vec![0.0; d];
    for (p, a) in alpha.iter().enumerate() {
        for i in 0..d {
            out[i] += a * o.value_out[head.head][p][i];
        }
    }
    out
}

pub fn contribution_oracle(trace: &Trace, head: HeadId, position: usize) -> Vec<f64> {
    let o = layer_oracle(trace, head.layer);
    let a = captured_alpha(trace, head)[position];
    o.value_out[head.head][position]
        .iter()
        .map(|v| a * v)
        .collect()
}

/// log p(token | x) with final normalization then unembedding, in loops.
pub fn log_prob_oracle(model: &Model, x: &[f64], token: u32) -> f64 {
    let logits = logits_oracle(model, x);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[token as usize] - max - z.ln()
}

pub fn logits_oracle(model: &Model, x: &[f64]) -> Vec<f64> {
    let normed = norm_loop(&model.weights().final_norm, x);
    let eu = model.weights().unembedding();
    (0..eu.nrows()).map(|b| row_dot(eu, b, &normed)).collect()
}

/// Raw logits of `x` against the embedding matrix, no normalization.
pub fn embedding_logits_oracle(model: &Model, x: &[f64]) -> Vec<f64> {
    let e = &model.weights().embed;
    (0..e.nrows()).map(|b| row_dot(e, b, x)).collect()
}

/// Ranking by full sort: descending logit, ties by ascending id. Returns the
/// 1-based rank of every token.
pub fn ranks_by_sort(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0; logits.len()];
    for (r, &tok) in order.iter().enumerate() {
        ranks[tok] = r + 1;
    }
    ranks
}

pub fn last_residual(trace: &Trace, layer: usize) -> Vec<f64> {
    trace.last_residual(layer).unwrap().to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn has_ffn(model: &Model) -> bool {
    !matches!(model.weights().layers[0].ffn, FfnWeights::None)
}
