// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small transformer trainer with hand-written backpropagation.
//!
//! The architecture is the subset the tracer understands natively: learned
//! positions, pre-RMSNorm, bias-free causal attention, an optional GELU MLP,
//! a final RMSNorm and an untied unembedding. Everything runs in `f64`.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AttentionWeights, FfnKind, FfnWeights, LayerWeights, Model, ModelConfig, ModelWeights, Norm,
    NormKind, Positional, TokenId, VisionConfig, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyArch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Hidden width of the MLP; `None` for attention-only models.
    pub d_ff: Option<usize>,
    pub max_positions: usize,
    pub norm_eps: f64,
}

impl ToyArch {
    pub fn model_config(&self, model_id: &str, vision: Option<VisionConfig>) -> ModelConfig {
        ModelConfig {
            model_id: model_id.to_owned(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_heads,
            d_model: self.d_model,
            head_dim: self.head_dim,
            d_ff: self.d_ff.unwrap_or(0),
            vocab_size: self.vocab_size,
            norm: NormKind::RmsNorm,
            norm_eps: self.norm_eps as f32,
            positional: Positional::Learned {
                max_positions: self.max_positions,
            },
            ffn: if self.d_ff.is_some() {
                FfnKind::Gelu
            } else {
                FfnKind::None
            },
            qkv_bias: false,
            out_bias: false,
            ffn_bias: true,
            tied_embeddings: false,
            vision,
            exposes_activations: true,
        }
    }
}

/// One training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    /// Positions whose input is the sum of several token embeddings instead
    /// of `tokens[p]`'s; this is how synthetic image patches are fed.
    pub bags: Vec<(usize, Vec<TokenId>)>,
    /// `(position, next token)` pairs that enter the loss.
    pub targets: Vec<(usize, TokenId)>,
}

#[derive(Debug, Clone)]
struct Mlp {
    g: Array1<f64>,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Layer {
    g: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    mlp: Option<Mlp>,
}

/// Trainable parameters; gradients and optimizer moments reuse the type.
#[derive(Debug, Clone)]
pub struct Params {
    embed: Array2<f64>,
    pos: Array2<f64>,
    layers: Vec<Layer>,
    final_g: Array1<f64>,
    unembed: Array2<f64>,
}

impl Params {
    pub fn init(arch: &ToyArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng))
        };
        let (d, hd) = (arch.d_model, arch.n_heads * arch.head_dim);
        let inv = 1.0 / (d as f64).sqrt();
        let embed = m(arch.vocab_size, d, 1.0);
        let pos = m(arch.max_positions, d, 1.0);
        let layers = (0..arch.n_layers)
            .map(|_| Layer {
                g: Array1::ones(d),
                wq: m(hd, d, inv),
                wk: m(hd, d, inv),
                wv: m(hd, d, inv),
                wo: m(d, hd, 0.5 / (hd as f64).sqrt()),
                mlp: arch.d_ff.map(|f| Mlp {
                    g: Array1::ones(d),
                    w_in: m(f, d, inv),
                    b_in: Array1::zeros(f),
                    w_out: m(d, f, 0.5 / (f as f64).sqrt()),
                    b_out: Array1::zeros(d),
                }),
            })
            .collect();
        let unembed = m(arch.vocab_size, d, inv);
        Self {
            embed,
            pos,
            layers,
            final_g: Array1::ones(d),
            unembed,
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (slice, _) in z.fields_mut() {
            slice.fill(0.0);
        }
        z
    }

    /// Every tensor as a flat slice, flagged when weight decay applies.
    fn fields_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![(sl(&mut self.embed), true), (sl(&mut self.pos), true)];
        for l in &mut self.layers {
            out.push((sl(&mut l.g), false));
            out.push((sl(&mut l.wq), true));
            out.push((sl(&mut l.wk), true));
            out.push((sl(&mut l.wv), true));
            out.push((sl(&mut l.wo), true));
            if let Some(m) = &mut l.mlp {
                out.push((sl(&mut m.g), false));
                out.push((sl(&mut m.w_in), true));
                out.push((sl(&mut m.b_in), false));
                out.push((sl(&mut m.w_out), true));
                out.push((sl(&mut m.b_out), false));
            }
        }
        out.push((sl(&mut self.final_g), false));
        out.push((sl(&mut self.unembed), true));
        out
    }

    pub fn len(&self) -> usize {
        self.clone().fields_mut().iter().map(|(s, _)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads or writes the `i`-th scalar in field order.
    pub fn scalar_mut(&mut self, mut i: usize) -> &mut f64 {
        for (s, _) in self.fields_mut() {
            if i < s.len() {
                return &mut s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn to_model(
        &self,
        arch: &ToyArch,
        vocab: Vocabulary,
        model_id: &str,
        vision: Option<VisionConfig>,
    ) -> Result<Model> {
        let cfg = arch.model_config(model_id, vision);
        if vocab.len() != arch.vocab_size {
            return Err(Error::input(format!(
                "vocabulary has {} tokens, architecture expects {}",
                vocab.len(),
                arch.vocab_size
            )));
        }
        let f = |a: &Array2<f64>| a.mapv(|v| v as f32);
        let norm = |g: &Array1<f64>| Norm {
            kind: NormKind::RmsNorm,
            weight: g.mapv(|v| v as f32),
            bias: None,
            eps: arch.norm_eps as f32,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (ffn_norm, ffn) = match &l.mlp {
                    None => (None, FfnWeights::None),
                    Some(m) => (
                        Some(norm(&m.g)),
                        FfnWeights::Gelu {
                            w_in: f(&m.w_in),
                            b_in: Some(m.b_in.mapv(|v| v as f32)),
                            w_out: f(&m.w_out),
                            b_out: Some(m.b_out.mapv(|v| v as f32)),
                        },
                    ),
                };
                LayerWeights {
                    attn_norm: norm(&l.g),
                    attn: AttentionWeights {
                        wq: f(&l.wq),
                        wk: f(&l.wk),
                        wv: f(&l.wv),
                        wo: f(&l.wo),
                        bq: None,
                        bk: None,
                        bv: None,
                        bo: None,
                    },
                    ffn_norm,
                    ffn,
                }
            })
            .collect();
        let weights = ModelWeights {
            embed: f(&self.embed),
            pos_embed: Some(f(&self.pos)),
            layers,
            final_norm: norm(&self.final_g),
            unembed: Some(f(&self.unembed)),
        };
        Model::new(cfg, vocab, weights)
    }
}

struct NormCache {
    xhat: Array2<f64>,
    rms: Array1<f64>,
}

fn rms_forward(x: &Array2<f64>, g: &Array1<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let rms = x.map_axis(Axis(1), |r| {
        (r.iter().map(|v| v * v).sum::<f64>() / d + eps).sqrt()
    });
    let xhat = x / &rms.view().insert_axis(Axis(1));
    let out = &xhat * g;
    (out, NormCache { xhat, rms })
}

fn rms_backward(
    dout: &Array2<f64>,
    g: &Array1<f64>,
    c: &NormCache,
    dg: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dout * &c.xhat).sum_axis(Axis(0));
    let dxhat = dout * g;
    let d = dout.ncols() as f64;
    let mut dx = Array2::zeros(dout.raw_dim());
    for r in 0..dout.nrows() {
        let dh = dxhat.row(r);
        let xh = c.xhat.row(r);
        let m = dh.dot(&xh) / d;
        let inv = 1.0 / c.rms[r];
        dx.row_mut(r).assign(&((&dh - &(&xh * m)) * inv));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Row layout of a batch: sequences concatenated back to back.
struct Layout {
    seqs: Vec<(usize, usize)>,
    rows: usize,
}

impl Layout {
    fn of(examples: &[Example]) -> Self {
        let mut seqs = Vec::with_capacity(examples.len());
        let mut off = 0;
        for e in examples {
            seqs.push((off, e.tokens.len()));
            off += e.tokens.len();
        }
        Self { seqs, rows: off }
    }
}

struct MlpCache {
    n: NormCache,
    m: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

struct LayerCache {
    n: NormCache,
    normed: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per (sequence, head), each `len * len` row-major.
    attn: Vec<Vec<f64>>,
    z: Array2<f64>,
    mlp: Option<MlpCache>,
}

struct Forward {
    layers: Vec<LayerCache>,
    final_n: NormCache,
    final_out: Array2<f64>,
    logits: Array2<f64>,
}

fn embed_rows(p: &Params, examples: &[Example], layout: &Layout) -> Array2<f64> {
    let d = p.embed.ncols();
    let mut x = Array2::zeros((layout.rows, d));
    for (e, &(off, len)) in examples.iter().zip(&layout.seqs) {
        for t in 0..len {
            let mut row = x.row_mut(off + t);
            row.assign(&p.embed.row(e.tokens[t] as usize));
            row += &p.pos.row(t);
        }
        for (t, bag) in &e.bags {
            let mut row = x.row_mut(off + t);
            row.assign(&p.pos.row(*t));
            for &tok in bag {
                row += &p.embed.row(tok as usize);
            }
        }
    }
    x
}

fn attention_forward(
    arch: &ToyArch,
    layout: &Layout,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> (Array2<f64>, Vec<Vec<f64>>) {
    let (hd, nh) = (arch.head_dim, arch.n_heads);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut z = Array2::zeros(q.raw_dim());
    let mut caches = Vec::with_capacity(layout.seqs.len() * nh);
    for &(off, len) in &layout.seqs {
        for h in 0..nh {
            let qh = q.slice(s![off..off + len, h * hd..(h + 1) * hd]);
            let kh = k.slice(s![off..off + len, h * hd..(h + 1) * hd]);
            let vh = v.slice(s![off..off + len, h * hd..(h + 1) * hd]);
            let scores = qh.dot(&kh.t());
            let mut a = vec![0.0; len * len];
            for i in 0..len {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    max = max.max(scores[[i, j]] * scale);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (scores[[i, j]] * scale - max).exp();
                    a[i * len + j] = e;
                    sum += e;
                }
                for j in 0..=i {
                    a[i * len + j] /= sum;
                }
            }
            let am = Array2::from_shape_vec((len, len), a).expect("square");
            z.slice_mut(s![off..off + len, h * hd..(h + 1) * hd])
                .assign(&am.dot(&vh));
            caches.push(am.into_raw_vec_and_offset().0);
        }
    }
    (z, caches)
}

fn forward(arch: &ToyArch, p: &Params, examples: &[Example], layout: &Layout) -> Forward {
    let mut x = embed_rows(p, examples, layout);
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (normed, n) = rms_forward(&x, &l.g, arch.norm_eps);
        let q = normed.dot(&l.wq.t());
        let k = normed.dot(&l.wk.t());
        let v = normed.dot(&l.wv.t());
        let (z, attn) = attention_forward(arch, layout, &q, &k, &v);
        x += &z.dot(&l.wo.t());
        let mlp = l.mlp.as_ref().map(|m| {
            let (mm, n) = rms_forward(&x, &m.g, arch.norm_eps);
            let u = mm.dot(&m.w_in.t()) + &m.b_in;
            let a = u.mapv(gelu);
            x += &(a.dot(&m.w_out.t()) + &m.b_out);
            MlpCache { n, m: mm, u, a }
        });
        layers.push(LayerCache {
            n,
            normed,
            q,
            k,
            v,
            attn,
            z,
            mlp,
        });
    }
    let (final_out, final_n) = rms_forward(&x, &p.final_g, arch.norm_eps);
    let logits = final_out.dot(&p.unembed.t());
    Forward {
        layers,
        final_n,
        final_out,
        logits,
    }
}

fn target_rows(examples: &[Example], layout: &Layout) -> Vec<(usize, TokenId)> {
    examples
        .iter()
        .zip(&layout.seqs)
        .flat_map(|(e, &(off, _))| e.targets.iter().map(move |&(p, t)| (off + p, t)))
        .collect()
}

/// Mean cross-entropy over all targets and its gradient.
pub fn loss_and_grad(arch: &ToyArch, p: &Params, examples: &[Example]) -> (f64, Params) {
    let layout = Layout::of(examples);
    let fw = forward(arch, p, examples, &layout);
    let targets = target_rows(examples, &layout);
    let n = targets.len().max(1) as f64;
    let mut dlogits = Array2::zeros(fw.logits.raw_dim());
    let mut loss = 0.0;
    for &(r, t) in &targets {
        let row = fw.logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += -(row[t as usize] - max - z.ln());
        let mut d = dlogits.row_mut(r);
        for (i, v) in row.iter().enumerate() {
            d[i] += (v - max).exp() / z / n;
        }
        d[t as usize] -= 1.0 / n;
    }
    let mut g = p.zeros_like();
    g.unembed = dlogits.t().dot(&fw.final_out);
    let dfinal = dlogits.dot(&p.unembed);
    let mut dx = rms_backward(&dfinal, &p.final_g, &fw.final_n, &mut g.final_g);
    let (hd, nh) = (arch.head_dim, arch.n_heads);
    let scale = 1.0 / (hd as f64).sqrt();
    for (li, (l, c)) in p.layers.iter().zip(&fw.layers).enumerate().rev() {
        let gl = &mut g.layers[li];
        if let (Some(m), Some(mc)) = (&l.mlp, &c.mlp) {
            let gm = gl.mlp.as_mut().expect("same shape");
            gm.w_out = dx.t().dot(&mc.a);
            gm.b_out = dx.sum_axis(Axis(0));
            let mut du = dx.dot(&m.w_out);
            du.zip_mut_with(&mc.u, |d, &u| *d *= gelu_grad(u));
            gm.w_in = du.t().dot(&mc.m);
            gm.b_in = du.sum_axis(Axis(0));
            let dm = du.dot(&m.w_in);
            dx += &rms_backward(&dm, &m.g, &mc.n, &mut gm.g);
        }
        gl.wo = dx.t().dot(&c.z);
        let dz = dx.dot(&l.wo);
        let mut dq = Array2::<f64>::zeros(c.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(c.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(c.v.raw_dim());
        for (si, &(off, len)) in layout.seqs.iter().enumerate() {
            for h in 0..nh {
                let rows = off..off + len;
                let cols = h * hd..(h + 1) * hd;
                let a = Array2::from_shape_vec((len, len), c.attn[si * nh + h].clone())
                    .expect("square");
                let dzh = dz.slice(s![rows.clone(), cols.clone()]);
                let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&a.t().dot(&dzh));
                let da = dzh.dot(&vh.t());
                let mut ds = Array2::<f64>::zeros((len, len));
                for i in 0..len {
                    let dot: f64 = (0..=i).map(|j| a[[i, j]] * da[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&kh));
                dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qh));
            }
        }
        gl.wq = dq.t().dot(&c.normed);
        gl.wk = dk.t().dot(&c.normed);
        gl.wv = dv.t().dot(&c.normed);
        let dn = dq.dot(&l.wq) + dk.dot(&l.wk) + dv.dot(&l.wv);
        dx += &rms_backward(&dn, &l.g, &c.n, &mut gl.g);
    }
    for (e, &(off, len)) in examples.iter().zip(&layout.seqs) {
        let bagged: Vec<usize> = e.bags.iter().map(|(t, _)| *t).collect();
        for t in 0..len {
            let row = dx.row(off + t);
            let mut prow = g.pos.row_mut(t);
            prow += &row;
            if !bagged.contains(&t) {
                let mut erow = g.embed.row_mut(e.tokens[t] as usize);
                erow += &row;
            }
        }
        for (t, bag) in &e.bags {
            for &tok in bag {
                let mut erow = g.embed.row_mut(tok as usize);
                erow += &dx.row(off + t);
            }
        }
    }
    (loss / n, g)
}

/// Logits at every position of every example, `(rows, vocab)` per example.
pub fn predict(arch: &ToyArch, p: &Params, examples: &[Example]) -> Vec<Array2<f64>> {
    let layout = Layout::of(examples);
    let fw = forward(arch, p, examples, &layout);
    layout
        .seqs
        .iter()
        .map(|&(off, len)| fw.logits.slice(s![off..off + len, ..]).to_owned())
        .collect()
}

/// Fraction of targets whose argmax logit is the target.
pub fn accuracy(arch: &ToyArch, p: &Params, examples: &[Example]) -> f64 {
    let logits = predict(arch, p, examples);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (e, l) in examples.iter().zip(&logits) {
        for &(pos, t) in &e.targets {
            let row = l.row(pos);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            hits += usize::from(best == t as usize);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub steps: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub min_lr_frac: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup: 100,
            steps: 2000,
            min_lr_frac: 0.1,
        }
    }
}

impl AdamW {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

pub struct Trainer {
    pub arch: ToyArch,
    pub params: Params,
    pub opt: AdamW,
    /// Group-lasso weight on each head's query, key, value and output slices.
    /// Pushes redundant heads to zero so one head carries each circuit.
    pub head_sparsity: f64,
    m: Params,
    v: Params,
    step: usize,
}

impl Trainer {
    pub fn new(arch: ToyArch, opt: AdamW, seed: u64) -> Self {
        let params = Params::init(&arch, seed);
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self {
            arch,
            params,
            opt,
            head_sparsity: 0.0,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimizer step on a batch; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[Example]) -> f64 {
        let (loss, mut grad) = loss_and_grad(&self.arch, &self.params, batch);
        if self.head_sparsity > 0.0 {
            let hd = self.arch.head_dim;
            for (l, gl) in self.params.layers.iter().zip(&mut grad.layers) {
                for h in 0..self.arch.n_heads {
                    let rows = s![h * hd..(h + 1) * hd, ..];
                    let cols = s![.., h * hd..(h + 1) * hd];
                    let sq = |a: ndarray::ArrayView2<f64>| a.iter().map(|v| v * v).sum::<f64>();
                    let norm = (sq(l.wq.slice(rows))
                        + sq(l.wk.slice(rows))
                        + sq(l.wv.slice(rows))
                        + sq(l.wo.slice(cols)))
                    .sqrt();
                    if norm > 0.0 {
                        let k = self.head_sparsity / norm;
                        gl.wq.slice_mut(rows).scaled_add(k, &l.wq.slice(rows));
                        gl.wk.slice_mut(rows).scaled_add(k, &l.wk.slice(rows));
                        gl.wv.slice_mut(rows).scaled_add(k, &l.wv.slice(rows));
                        gl.wo.slice_mut(cols).scaled_add(k, &l.wo.slice(cols));
                    }
                }
            }
        }
        let o = self.opt;
        let lr = o.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - o.beta1.powi(self.step as i32);
        let bc2 = 1.0 - o.beta2.powi(self.step as i32);
        let gs = grad.fields_mut();
        let ms = self.m.fields_mut();
        let vs = self.v.fields_mut();
        let ps = self.params.fields_mut();
        for (((p, decay), (g, _)), ((m, _), (v, _))) in
            ps.into_iter().zip(gs).zip(ms.into_iter().zip(vs))
        {
            for i in 0..p.len() {
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + o.eps);
                if decay {
                    p[i] -= lr * o.weight_decay * p[i];
                }
                p[i] -= lr * update;
            }
        }
        loss
    }
}
