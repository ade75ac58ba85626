// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter containers. Projection matrices are stored `(out, in)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis};

use super::config::{FfnKind, ModelConfig, NormKind, Positional};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub weight: Array1<f32>,
    pub bias: Option<Array1<f32>>,
    pub eps: f32,
}

impl Norm {
    pub fn identity(kind: NormKind, d: usize, eps: f32) -> Self {
        let bias = (kind == NormKind::LayerNorm).then(|| Array1::zeros(d));
        Self {
            kind,
            weight: Array1::ones(d),
            bias,
            eps,
        }
    }

    pub fn apply(&self, x: ArrayView1<f32>) -> Array1<f32> {
        let d = x.len() as f32;
        let centered;
        let x = match self.kind {
            NormKind::RmsNorm => x.to_owned(),
            NormKind::LayerNorm => {
                let mean = x.sum() / d;
                centered = x.mapv(|v| v - mean);
                centered
            }
        };
        let ms = x.iter().map(|v| v * v).sum::<f32>() / d;
        let scale = 1.0 / (ms + self.eps).sqrt();
        let mut out = &x * scale * &self.weight;
        if let Some(b) = &self.bias {
            out += b;
        }
        out
    }

    pub fn apply_rows(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros(x.raw_dim());
        for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            dst.assign(&self.apply(src));
        }
        out
    }

    /// Same transform evaluated in double precision.
    pub fn apply_f64(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let d = x.len() as f64;
        let x = match self.kind {
            NormKind::RmsNorm => x.to_owned(),
            NormKind::LayerNorm => {
                let mean = x.sum() / d;
                x.mapv(|v| v - mean)
            }
        };
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
        let scale = 1.0 / (ms + f64::from(self.eps)).sqrt();
        let mut out = Array1::from_shape_fn(x.len(), |i| x[i] * scale * f64::from(self.weight[i]));
        if let Some(b) = &self.bias {
            out.zip_mut_with(b, |o, &bi| *o += f64::from(bi));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// `(n_heads * head_dim, d_model)`
    pub wq: Array2<f32>,
    /// `(n_kv_heads * head_dim, d_model)`
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    /// `(d_model, n_heads * head_dim)`
    pub wo: Array2<f32>,
    pub bq: Option<Array1<f32>>,
    pub bk: Option<Array1<f32>>,
    pub bv: Option<Array1<f32>>,
    pub bo: Option<Array1<f32>>,
}

#[derive(Debug, Clone)]
pub enum FfnWeights {
    None,
    Gelu {
        w_in: Array2<f32>,
        b_in: Option<Array1<f32>>,
        w_out: Array2<f32>,
        b_out: Option<Array1<f32>>,
    },
    SwiGlu {
        gate: Array2<f32>,
        up: Array2<f32>,
        down: Array2<f32>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Norm,
    pub attn: AttentionWeights,
    pub ffn_norm: Option<Norm>,
    pub ffn: FfnWeights,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    /// Token embedding `E`, `(vocab, d_model)`.
    pub embed: Array2<f32>,
    pub pos_embed: Option<Array2<f32>>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
    /// Unembedding `E_u`, `(vocab, d_model)`; `None` when tied to `embed`.
    pub unembed: Option<Array2<f32>>,
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "`{name}` has shape {got:?}, expected {want:?}"
        )))
    }
}

impl ModelWeights {
    pub fn unembedding(&self) -> &Array2<f32> {
        self.unembed.as_ref().unwrap_or(&self.embed)
    }

    /// Checks every tensor against the architecture description.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (b, d, hd) = (cfg.vocab_size, cfg.d_model, cfg.head_dim);
        let q_dim = cfg.n_heads * hd;
        let kv_dim = cfg.n_kv_heads * hd;
        expect_shape("embed", self.embed.shape(), &[b, d])?;
        expect_shape("unembed", self.unembedding().shape(), &[b, d])?;
        if cfg.tied_embeddings != self.unembed.is_none() {
            return Err(Error::shape(
                "tied_embeddings disagrees with the stored unembedding",
            ));
        }
        match (cfg.positional, &self.pos_embed) {
            (Positional::Learned { max_positions }, Some(p)) => {
                expect_shape("pos_embed", p.shape(), &[max_positions, d])?
            }
            (Positional::Learned { .. }, None) => {
                return Err(Error::shape(
                    "learned positions configured but pos_embed missing",
                ))
            }
            (_, Some(_)) => return Err(Error::shape("pos_embed present but not configured")),
            _ => {}
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape(format!(
                "{} layers stored, {} configured",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let check_norm = |name: &str, n: &Norm| -> Result<()> {
            expect_shape(name, n.weight.shape(), &[d])?;
            if n.kind != cfg.norm {
                return Err(Error::shape(format!("`{name}` has the wrong norm kind")));
            }
            Ok(())
        };
        check_norm("final_norm", &self.final_norm)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &layer.attn;
            check_norm(&format!("layers.{l}.attn_norm"), &layer.attn_norm)?;
            expect_shape(&format!("layers.{l}.attn.wq"), a.wq.shape(), &[q_dim, d])?;
            expect_shape(&format!("layers.{l}.attn.wk"), a.wk.shape(), &[kv_dim, d])?;
            expect_shape(&format!("layers.{l}.attn.wv"), a.wv.shape(), &[kv_dim, d])?;
            expect_shape(&format!("layers.{l}.attn.wo"), a.wo.shape(), &[d, q_dim])?;
            for (name, bias, dim, on) in [
                ("bq", &a.bq, q_dim, cfg.qkv_bias),
                ("bk", &a.bk, kv_dim, cfg.qkv_bias),
                ("bv", &a.bv, kv_dim, cfg.qkv_bias),
                ("bo", &a.bo, d, cfg.out_bias),
            ] {
                match bias {
                    Some(v) if on => {
                        expect_shape(&format!("layers.{l}.attn.{name}"), v.shape(), &[dim])?
                    }
                    None if !on => {}
                    _ => {
                        return Err(Error::shape(format!(
                            "layers.{l}.attn.{name} presence mismatch"
                        )))
                    }
                }
            }
            match (&layer.ffn, cfg.ffn) {
                (FfnWeights::None, FfnKind::None) => {}
                (FfnWeights::Gelu { w_in, w_out, .. }, FfnKind::Gelu) => {
                    expect_shape(
                        &format!("layers.{l}.ffn.w_in"),
                        w_in.shape(),
                        &[cfg.d_ff, d],
                    )?;
                    expect_shape(
                        &format!("layers.{l}.ffn.w_out"),
                        w_out.shape(),
                        &[d, cfg.d_ff],
                    )?;
                }
                (FfnWeights::SwiGlu { gate, up, down }, FfnKind::SwiGlu) => {
                    expect_shape(
                        &format!("layers.{l}.ffn.gate"),
                        gate.shape(),
                        &[cfg.d_ff, d],
                    )?;
                    expect_shape(&format!("layers.{l}.ffn.up"), up.shape(), &[cfg.d_ff, d])?;
                    expect_shape(
                        &format!("layers.{l}.ffn.down"),
                        down.shape(),
                        &[d, cfg.d_ff],
                    )?;
                }
                _ => return Err(Error::shape(format!("layers.{l}.ffn kind mismatch"))),
            }
            if cfg.ffn != FfnKind::None {
                match &layer.ffn_norm {
                    Some(n) => check_norm(&format!("layers.{l}.ffn_norm"), n)?,
                    None => return Err(Error::shape(format!("layers.{l}.ffn_norm missing"))),
                }
            }
        }
        Ok(())
    }

    /// Flat `name -> tensor` listing used by the archive format.
    pub fn to_named(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        let mut put = |name: String, a: ArrayD<f32>| {
            out.insert(name, a);
        };
        put("embed".into(), self.embed.clone().into_dyn());
        if let Some(p) = &self.pos_embed {
            put("pos_embed".into(), p.clone().into_dyn());
        }
        if let Some(u) = &self.unembed {
            put("unembed".into(), u.clone().into_dyn());
        }
        let put_norm = |out: &mut BTreeMap<String, ArrayD<f32>>, prefix: String, n: &Norm| {
            out.insert(format!("{prefix}.weight"), n.weight.clone().into_dyn());
            if let Some(b) = &n.bias {
                out.insert(format!("{prefix}.bias"), b.clone().into_dyn());
            }
        };
        put_norm(&mut out, "final_norm".into(), &self.final_norm);
        for (l, layer) in self.layers.iter().enumerate() {
            put_norm(&mut out, format!("layers.{l}.attn_norm"), &layer.attn_norm);
            if let Some(n) = &layer.ffn_norm {
                put_norm(&mut out, format!("layers.{l}.ffn_norm"), n);
            }
            let a = &layer.attn;
            for (name, m) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.insert(format!("layers.{l}.attn.{name}"), m.clone().into_dyn());
            }
            for (name, b) in [("bq", &a.bq), ("bk", &a.bk), ("bv", &a.bv), ("bo", &a.bo)] {
                if let Some(b) = b {
                    out.insert(format!("layers.{l}.attn.{name}"), b.clone().into_dyn());
                }
            }
            match &layer.ffn {
                FfnWeights::None => {}
                FfnWeights::Gelu {
                    w_in,
                    b_in,
                    w_out,
                    b_out,
                } => {
                    out.insert(format!("layers.{l}.ffn.w_in"), w_in.clone().into_dyn());
                    out.insert(format!("layers.{l}.ffn.w_out"), w_out.clone().into_dyn());
                    if let Some(b) = b_in {
                        out.insert(format!("layers.{l}.ffn.b_in"), b.clone().into_dyn());
                    }
                    if let Some(b) = b_out {
                        out.insert(format!("layers.{l}.ffn.b_out"), b.clone().into_dyn());
                    }
                }
                FfnWeights::SwiGlu { gate, up, down } => {
                    out.insert(format!("layers.{l}.ffn.gate"), gate.clone().into_dyn());
                    out.insert(format!("layers.{l}.ffn.up"), up.clone().into_dyn());
                    out.insert(format!("layers.{l}.ffn.down"), down.clone().into_dyn());
                }
            }
        }
        out
    }

    /// Inverse of [`ModelWeights::to_named`]; shapes are checked by `validate`.
    pub fn from_named(cfg: &ModelConfig, named: BTreeMap<String, ArrayD<f32>>) -> Result<Self> {
        let mut t = Named(named);
        let embed = t.matrix("embed")?;
        let pos_embed = match cfg.positional {
            Positional::Learned { .. } => Some(t.matrix("pos_embed")?),
            _ => None,
        };
        let unembed = if cfg.tied_embeddings {
            None
        } else {
            Some(t.matrix("unembed")?)
        };
        let final_norm = t.norm(cfg, "final_norm")?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = t.norm(cfg, &format!("{p}.attn_norm"))?;
            let ffn_norm = match cfg.ffn {
                FfnKind::None => None,
                _ => Some(t.norm(cfg, &format!("{p}.ffn_norm"))?),
            };
            let attn = AttentionWeights {
                wq: t.matrix(&format!("{p}.attn.wq"))?,
                wk: t.matrix(&format!("{p}.attn.wk"))?,
                wv: t.matrix(&format!("{p}.attn.wv"))?,
                wo: t.matrix(&format!("{p}.attn.wo"))?,
                bq: t.vector(&format!("{p}.attn.bq"))?,
                bk: t.vector(&format!("{p}.attn.bk"))?,
                bv: t.vector(&format!("{p}.attn.bv"))?,
                bo: t.vector(&format!("{p}.attn.bo"))?,
            };
            let ffn = match cfg.ffn {
                FfnKind::None => FfnWeights::None,
                FfnKind::Gelu => FfnWeights::Gelu {
                    w_in: t.matrix(&format!("{p}.ffn.w_in"))?,
                    b_in: t.vector(&format!("{p}.ffn.b_in"))?,
                    w_out: t.matrix(&format!("{p}.ffn.w_out"))?,
                    b_out: t.vector(&format!("{p}.ffn.b_out"))?,
                },
                FfnKind::SwiGlu => FfnWeights::SwiGlu {
                    gate: t.matrix(&format!("{p}.ffn.gate"))?,
                    up: t.matrix(&format!("{p}.ffn.up"))?,
                    down: t.matrix(&format!("{p}.ffn.down"))?,
                },
            };
            layers.push(LayerWeights {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        if let Some(extra) = t.0.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}`")));
        }
        let weights = Self {
            embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        };
        weights.validate(cfg)?;
        Ok(weights)
    }
}

struct Named(BTreeMap<String, ArrayD<f32>>);

impl Named {
    fn matrix(&mut self, name: &str) -> Result<Array2<f32>> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))?
            .into_dimensionality()
            .map_err(|_| Error::format(format!("tensor `{name}` is not 2-d")))
    }

    fn vector(&mut self, name: &str) -> Result<Option<Array1<f32>>> {
        self.0
            .remove(name)
            .map(|a| {
                a.into_dimensionality()
                    .map_err(|_| Error::format(format!("tensor `{name}` is not 1-d")))
            })
            .transpose()
    }

    fn norm(&mut self, cfg: &ModelConfig, prefix: &str) -> Result<Norm> {
        let weight = self
            .vector(&format!("{prefix}.weight"))?
            .ok_or_else(|| Error::format(format!("missing tensor `{prefix}.weight`")))?;
        Ok(Norm {
            kind: cfg.norm,
            weight,
            bias: self.vector(&format!("{prefix}.bias"))?,
            eps: cfg.norm_eps,
        })
    }
}
