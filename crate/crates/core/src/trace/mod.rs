// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented forward pass.
//!
//! [`ModelHandle::run_traced`] runs the decoder once and keeps everything the
//! attribution code needs: every layer's residual stream, the attention row of
//! the last query at every layer and head, the last position's attention and
//! FFN outputs, and the final logits. Value-output vectors are recomputed on
//! demand from the stored layer inputs unless `cache_values` is set.
//!
//! Layers are numbered `0..n_layers`; `layer_input(l)` is the residual stream
//! entering layer `l` and `layer_input(n_layers)` the final residual.

mod export;
mod head;
mod position;

use std::fmt;
use std::sync::Arc;

use half::f16;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use export::TRACE_FORMAT;
pub use head::HeadId;
pub use position::{PositionMap, Span, VisualSpan};

use crate::error::{Error, Result};
use crate::model::{forward, CaptureSpec, Model, ModelHandle, ModelInput, TokenId};
use crate::numeric::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapturePrecision {
    #[default]
    F32,
    /// Stored activations are rounded through IEEE half precision.
    F16,
}

impl fmt::Display for CapturePrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F16 => "f16",
        })
    }
}

impl std::str::FromStr for CapturePrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "fp32" => Ok(Self::F32),
            "f16" | "fp16" => Ok(Self::F16),
            other => Err(Error::input(format!("unknown capture precision `{other}`"))),
        }
    }
}

/// Decomposition tolerances for a capture precision.
///
/// The 32-bit values are the contract; half-precision capture widens them by
/// a constant factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// `h^l = h^{l-1} + A^l + F^l` at the last position.
    pub residual: f64,
    /// Sum of head outputs against the captured attention output.
    pub head_sum: f64,
    /// Sum of position contributions against the head output.
    pub position_sum: f64,
    /// Attention rows sum to one.
    pub row_sum: f64,
}

impl Tolerances {
    pub const F32: Self = Self {
        residual: 1e-4,
        head_sum: 1e-4,
        position_sum: 1e-5,
        row_sum: 1e-5,
    };

    pub const HALF_PRECISION_FACTOR: f64 = 10.0;

    pub fn for_precision(p: CapturePrecision) -> Self {
        match p {
            CapturePrecision::F32 => Self::F32,
            CapturePrecision::F16 => {
                let k = Self::HALF_PRECISION_FACTOR;
                Self {
                    residual: Self::F32.residual * k,
                    head_sum: Self::F32.head_sum * k,
                    position_sum: Self::F32.position_sum * k,
                    row_sum: Self::F32.row_sum * k,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptureOptions {
    /// Keep attention rows for every query position, not only the last.
    #[serde(default)]
    pub full_attention: bool,
    /// Store per-head value vectors instead of recomputing them.
    #[serde(default)]
    pub cache_values: bool,
    #[serde(default)]
    pub precision: CapturePrecision,
}

/// Immutable record of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    model: Arc<Model>,
    tokens: Vec<TokenId>,
    position_map: PositionMap,
    options: CaptureOptions,
    /// `[n_layers + 1, T, d]`
    residual: Array3<f32>,
    /// `[n_layers, H, T]`
    attn_last: Array3<f32>,
    /// `[n_layers, H, T, T]`
    attn_full: Option<Array4<f32>>,
    /// `[n_layers, d]`
    attn_out_last: Array2<f32>,
    ffn_out_last: Array2<f32>,
    /// `[n_layers, H, T, head_dim]`
    values: Option<Array4<f32>>,
    logits: Array1<f32>,
}

fn round_half<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>) {
    a.mapv_inplace(|v| f16::from_f32(v).to_f32());
}

impl ModelHandle {
    /// Runs exactly one instrumented forward pass.
    pub fn run_traced(
        &self,
        input: &ModelInput,
        position_map: &PositionMap,
        options: CaptureOptions,
    ) -> Result<Trace> {
        let model = self.model().clone();
        if !model.config().exposes_activations {
            return Err(Error::Capability(format!(
                "model `{}` does not expose intermediate activations",
                model.id()
            )));
        }
        input.validate(&model)?;
        position_map.validate()?;
        if position_map.len() != input.len() {
            return Err(Error::shape(format!(
                "position map covers {} positions, input has {}",
                position_map.len(),
                input.len()
            )));
        }
        let declared = position_map.visual_span();
        let supplied = input.visual.as_ref().map(|v| {
            let r = v.span();
            Span::new(r.start, r.end)
        });
        if declared != supplied {
            return Err(Error::shape(format!(
                "visual block {supplied:?} does not match the declared visual span {declared:?}"
            )));
        }
        let spec = CaptureSpec {
            full_attention: options.full_attention,
            cache_values: options.cache_values,
        };
        let (logits, captured) = self.queue().run(|| {
            self.counters().bump_traced();
            forward(&model, input, Some(spec))
        })?;
        let mut c = captured.expect("capture requested");
        if options.precision == CapturePrecision::F16 {
            round_half(&mut c.residual);
            round_half(&mut c.attn_last);
            round_half(&mut c.attn_out_last);
            round_half(&mut c.ffn_out_last);
            if let Some(a) = c.attn_full.as_mut() {
                round_half(a);
            }
            if let Some(v) = c.values.as_mut() {
                round_half(v);
            }
        }
        Ok(Trace {
            model,
            tokens: input.tokens.clone(),
            position_map: position_map.clone(),
            options,
            residual: c.residual,
            attn_last: c.attn_last,
            attn_full: c.attn_full,
            attn_out_last: c.attn_out_last,
            ffn_out_last: c.ffn_out_last,
            values: c.values,
            logits,
        })
    }
}

/// Worst-case deviations of the additive decompositions in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionErrors {
    pub residual: f64,
    pub head_sum: f64,
    pub position_sum: f64,
    pub row_sum: f64,
}

impl DecompositionErrors {
    pub fn within(&self, tol: &Tolerances) -> bool {
        self.residual <= tol.residual
            && self.head_sum <= tol.head_sum
            && self.position_sum <= tol.position_sum
            && self.row_sum <= tol.row_sum
    }
}

fn max_abs(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

impl Trace {
    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn position_map(&self) -> &PositionMap {
        &self.position_map
    }

    pub fn options(&self) -> CaptureOptions {
        self.options
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances::for_precision(self.options.precision)
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn n_layers(&self) -> usize {
        self.attn_last.shape()[0]
    }

    pub fn n_heads(&self) -> usize {
        self.attn_last.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.residual.shape()[2]
    }

    pub fn logits(&self) -> ArrayView1<'_, f32> {
        self.logits.view()
    }

    /// Argmax of the final logits.
    pub fn predicted_token(&self) -> TokenId {
        argmax(self.logits.as_slice().expect("contiguous logits")) as TokenId
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        let h = self.n_heads();
        (0..self.n_layers()).flat_map(move |l| (0..h).map(move |j| HeadId::new(l, j)))
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer < self.n_layers() && head.head < self.n_heads() {
            Ok(())
        } else {
            Err(Error::index(format!(
                "head {head} outside {} layers x {} heads",
                self.n_layers(),
                self.n_heads()
            )))
        }
    }

    pub fn check_position(&self, position: usize) -> Result<()> {
        if position < self.seq_len() {
            Ok(())
        } else {
            Err(Error::index(format!(
                "position {position} outside sequence of length {}",
                self.seq_len()
            )))
        }
    }

    /// Residual stream entering `layer` (`layer == n_layers` gives the final
    /// residual), `[T, d]`.
    pub fn layer_input(&self, layer: usize) -> Result<ArrayView2<'_, f32>> {
        if layer > self.n_layers() {
            return Err(Error::index(format!(
                "layer {layer} outside 0..={}",
                self.n_layers()
            )));
        }
        Ok(self.residual.index_axis(Axis(0), layer))
    }

    pub fn residual_at(&self, layer: usize, position: usize) -> Result<Array1<f64>> {
        self.check_position(position)?;
        Ok(self.layer_input(layer)?.row(position).mapv(f64::from))
    }

    /// Residual entering `layer` at the last position, `h_T^{l-1}`.
    pub fn last_residual(&self, layer: usize) -> Result<Array1<f64>> {
        self.residual_at(layer, self.last_position())
    }

    pub fn attention_output(&self, layer: usize) -> Result<ArrayView1<'_, f32>> {
        self.check_head(HeadId::new(layer, 0))?;
        Ok(self.attn_out_last.row(layer))
    }

    pub fn ffn_output(&self, layer: usize) -> Result<ArrayView1<'_, f32>> {
        self.check_head(HeadId::new(layer, 0))?;
        Ok(self.ffn_out_last.row(layer))
    }

    /// Attention weights of the last query position, length `T`.
    pub fn attention(&self, head: HeadId) -> Result<ArrayView1<'_, f32>> {
        self.check_head(head)?;
        Ok(self.attn_last.slice(s![head.layer, head.head, ..]))
    }

    /// Attention weights of an arbitrary query; needs `full_attention` unless
    /// `query` is the last position.
    pub fn attention_row(&self, head: HeadId, query: usize) -> Result<ArrayView1<'_, f32>> {
        self.check_head(head)?;
        self.check_position(query)?;
        if query == self.last_position() {
            return self.attention(head);
        }
        let full = self.attn_full.as_ref().ok_or_else(|| {
            Error::Capability("trace was captured without full attention rows".into())
        })?;
        Ok(full.slice(s![head.layer, head.head, query, ..]))
    }

    /// Normalized layer input rows `[T, d]` as seen by the attention block.
    fn attn_inputs(&self, layer: usize) -> Array2<f64> {
        let norm = &self.model.weights().layers[layer].attn_norm;
        let x = self.residual.index_axis(Axis(0), layer);
        let mut out = Array2::zeros((x.nrows(), x.ncols()));
        for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            dst.assign(&norm.apply_f64(src.mapv(f64::from).view()));
        }
        out
    }

    /// Value projection rows of `head` (bias included), `[hd, d]` and `[hd]`.
    fn value_params(&self, head: HeadId) -> (Array2<f64>, Option<Array1<f64>>) {
        let cfg = self.model.config();
        let attn = &self.model.weights().layers[head.layer].attn;
        let g = cfg.kv_head_of(head.head);
        let rows = g * cfg.head_dim..(g + 1) * cfg.head_dim;
        let wv = attn.wv.slice(s![rows.clone(), ..]).mapv(f64::from);
        let bv = attn.bv.as_ref().map(|b| b.slice(s![rows]).mapv(f64::from));
        (wv, bv)
    }

    /// Output projection columns of `head`, `[d, hd]`, and its share of the
    /// output bias (split evenly across heads so head outputs sum exactly to
    /// the attention output).
    fn output_params(&self, head: HeadId) -> (Array2<f64>, Option<Array1<f64>>) {
        let cfg = self.model.config();
        let attn = &self.model.weights().layers[head.layer].attn;
        let cols = head.head * cfg.head_dim..(head.head + 1) * cfg.head_dim;
        let wo = attn.wo.slice(s![.., cols]).mapv(f64::from);
        let bo = attn
            .bo
            .as_ref()
            .map(|b| b.mapv(|v| f64::from(v) / cfg.n_heads as f64));
        (wo, bo)
    }

    /// Value vectors of `head` at every position, `[T, hd]`.
    fn values_of(&self, head: HeadId) -> Array2<f64> {
        if let Some(v) = &self.values {
            return v.slice(s![head.layer, head.head, .., ..]).mapv(f64::from);
        }
        let (wv, bv) = self.value_params(head);
        let mut v = self.attn_inputs(head.layer).dot(&wv.t());
        if let Some(b) = bv {
            v += &b;
        }
        v
    }

    /// Unweighted value-output vectors of `head` at every position, `[T, d]`.
    pub fn value_outputs(&self, head: HeadId) -> Result<Array2<f64>> {
        self.check_head(head)?;
        let (wo, bo) = self.output_params(head);
        let mut out = self.values_of(head).dot(&wo.t());
        if let Some(b) = bo {
            out += &b;
        }
        Ok(out)
    }

    /// Unweighted value-output vector of `head` at `position`.
    pub fn value_output(&self, head: HeadId, position: usize) -> Result<Array1<f64>> {
        self.check_head(head)?;
        self.check_position(position)?;
        let (wo, bo) = self.output_params(head);
        let v = if let Some(cache) = &self.values {
            cache
                .slice(s![head.layer, head.head, position, ..])
                .mapv(f64::from)
        } else {
            let (wv, bv) = self.value_params(head);
            let norm = &self.model.weights().layers[head.layer].attn_norm;
            let x = self
                .residual
                .slice(s![head.layer, position, ..])
                .mapv(f64::from);
            let mut v = wv.dot(&norm.apply_f64(x.view()));
            if let Some(b) = bv {
                v += &b;
            }
            v
        };
        let mut out = wo.dot(&v);
        if let Some(b) = bo {
            out += &b;
        }
        Ok(out)
    }

    /// Weighted contribution of `position` to `head`'s output at the last
    /// query.
    pub fn position_contribution(&self, head: HeadId, position: usize) -> Result<Array1<f64>> {
        self.position_contribution_at(head, self.last_position(), position)
    }

    pub fn position_contribution_at(
        &self,
        head: HeadId,
        query: usize,
        position: usize,
    ) -> Result<Array1<f64>> {
        self.check_position(position)?;
        let alpha = f64::from(self.attention_row(head, query)?[position]);
        if alpha == 0.0 {
            return Ok(Array1::zeros(self.d_model()));
        }
        Ok(self.value_output(head, position)? * alpha)
    }

    /// All weighted position contributions of `head` at the last query,
    /// `[T, d]`.
    pub fn position_contributions(&self, head: HeadId) -> Result<Array2<f64>> {
        let alpha = self.attention(head)?.mapv(f64::from);
        let mut out = self.value_outputs(head)?;
        for (mut row, &a) in out.axis_iter_mut(Axis(0)).zip(alpha.iter()) {
            row *= a;
        }
        Ok(out)
    }

    /// Output of `head` at the last query position.
    pub fn head_output(&self, head: HeadId) -> Result<Array1<f64>> {
        self.head_output_at(head, self.last_position())
    }

    pub fn head_output_at(&self, head: HeadId, query: usize) -> Result<Array1<f64>> {
        let alpha = self.attention_row(head, query)?.mapv(f64::from);
        let mixed = alpha.dot(&self.values_of(head));
        let (wo, bo) = self.output_params(head);
        let mut out = wo.dot(&mixed);
        if let Some(b) = bo {
            out += &b;
        }
        Ok(out)
    }

    /// Measures every additive identity the attribution code relies on.
    pub fn decomposition_errors(&self) -> Result<DecompositionErrors> {
        let mut errs = DecompositionErrors {
            residual: 0.0,
            head_sum: 0.0,
            position_sum: 0.0,
            row_sum: 0.0,
        };
        for l in 0..self.n_layers() {
            let before = self.last_residual(l)?;
            let after = self.last_residual(l + 1)?;
            let attn = self.attention_output(l)?.mapv(f64::from);
            let ffn = self.ffn_output(l)?.mapv(f64::from);
            errs.residual = errs
                .residual
                .max(max_abs(after.view(), (&before + &attn + &ffn).view()));
            let mut head_sum = Array1::<f64>::zeros(self.d_model());
            for j in 0..self.n_heads() {
                let head = HeadId::new(l, j);
                let out = self.head_output(head)?;
                let by_position = self.position_contributions(head)?.sum_axis(Axis(0));
                errs.position_sum = errs
                    .position_sum
                    .max(max_abs(out.view(), by_position.view()));
                let row_sum: f64 = self.attention(head)?.iter().map(|&a| f64::from(a)).sum();
                errs.row_sum = errs.row_sum.max((row_sum - 1.0).abs());
                head_sum += &out;
            }
            errs.head_sum = errs.head_sum.max(max_abs(head_sum.view(), attn.view()));
        }
        Ok(errs)
    }
}
