// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-call analysis of a question, and follow-up probes that reuse its
//! trace without running the model again.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    average_attention_map, patch_score_map, Attributor, HeadScores, HeadSelection, MapMethod,
    PatchScoreMap, Scaling,
};
use crate::error::{Error, Result};
use crate::mm::heatmap::{render_heatmap, HeatmapRender};
use crate::mm::prepare::{prepare_vqa_input, PreparedInput};
use crate::mm::template::{render, Templates, Value};
use crate::mm::VisionEncoder;
use crate::model::{GridDims, Model, ModelHandle, ModelInput, TokenId};
use crate::projection::{project, ProjectionSlice, Provenance, Space, TokenTarget};
use crate::trace::{CaptureOptions, HeadId, PositionMap, Span, Trace};

pub const ANALYZE_SCHEMA: &str = "analyze-response-v1";
pub const PROBE_SCHEMA: &str = "probe-response-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    pub top_k: usize,
    /// Heads summed into the patch map; defaults to the top `top_k`.
    pub heads: Option<HeadSelection>,
    /// Token to attribute instead of the predicted one: a word, or `#id`.
    pub target: Option<String>,
    pub max_new_tokens: usize,
    pub capture: CaptureOptions,
    /// Leave timings out of the response so it is byte-reproducible.
    pub deterministic: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            top_k: crate::attribution::DEFAULT_TOP_K,
            heads: None,
            target: None,
            max_new_tokens: 8,
            capture: CaptureOptions::default(),
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeRequest {
    pub question: String,
    /// Textual context placed before the question (text mode).
    pub context: Option<String>,
    /// Encoded image (visual mode).
    pub image: Option<Vec<u8>>,
    pub options: AnalyzeOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub id: TokenId,
    pub token: String,
}

impl TokenInfo {
    fn of(model: &Model, id: TokenId) -> Self {
        Self {
            id,
            token: model.vocab().token(id).unwrap_or("").to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub head: HeadId,
    pub score: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPair {
    pub logprob: PatchScoreMap,
    pub avg_attention: PatchScoreMap,
    /// Range covering both maps, for side-by-side rendering.
    pub shared_scaling: Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    /// Instrumented passes used for attribution.
    pub traced: u64,
    /// Plain passes used to generate the rest of the answer.
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prepare_ms: f64,
    pub trace_ms: f64,
    pub attribution_ms: f64,
    pub generation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapRefs {
    pub image: String,
    pub logprob: String,
    pub avg_attention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub schema: String,
    pub model_id: String,
    pub prompt: String,
    pub answer: String,
    pub answer_tokens: Vec<TokenInfo>,
    pub predicted: TokenInfo,
    pub target: TokenInfo,
    pub target_log_prob: f64,
    pub top_heads: Vec<HeadSummary>,
    pub grid: Option<GridDims>,
    pub visual_span: Option<Span>,
    pub maps: Option<MapPair>,
    pub passes: PassCount,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<HeatmapRefs>,
}

/// Result of [`analyze`]: the response plus everything probes need.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub prepared: PreparedInput,
    pub trace: Trace,
    pub response: AnalyzeResponse,
    target: TokenId,
}

fn parse_target(model: &Model, spec: &str) -> Result<TokenId> {
    if let Some(id) = spec.strip_prefix('#') {
        let id: TokenId = id
            .parse()
            .map_err(|_| Error::input(format!("target `{spec}` is not `#<token id>`")))?;
        model.check_token(id)?;
        return Ok(id);
    }
    let t = TokenTarget::new(model.vocab(), spec)?;
    Ok(*t.ids.iter().next().expect("targets are non-empty"))
}

/// Wall-clock timer that never touches the clock when timings are off, so
/// deterministic analyses also run where no clock exists (wasm32).
struct Stopwatch(Option<Instant>);

impl Stopwatch {
    fn start(enabled: bool) -> Self {
        Self(enabled.then(Instant::now))
    }

    fn ms(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }
}

fn prepare_text(
    model: &Model,
    templates: &Templates,
    req: &AnalyzeRequest,
) -> Result<PreparedInput> {
    let vocab = model.vocab();
    let question = Value::Text(&req.question);
    let rendered = match &req.context {
        Some(ctx) => render(
            vocab,
            &templates.tqa,
            &[("facts", Value::Text(ctx)), ("question", question)],
        )?,
        None => render(vocab, &templates.vqa, &[("question", question)])?,
    };
    let mut tokens: Vec<TokenId> = vocab.bos().into_iter().collect();
    let offset = tokens.len();
    tokens.extend_from_slice(&rendered.tokens);
    if let Some(max) = model.config().max_positions() {
        if tokens.len() > max {
            return Err(Error::input(format!(
                "prompt needs {} positions, context budget is {max}",
                tokens.len()
            )));
        }
    }
    let map = PositionMap::new(tokens.len(), None, Span::new(offset, tokens.len()))?;
    Ok(PreparedInput {
        input: ModelInput::text(tokens),
        position_map: map,
        prompt: rendered.text,
        image: None,
    })
}

fn head_selection(opts: &AnalyzeOptions) -> HeadSelection {
    opts.heads
        .clone()
        .unwrap_or(HeadSelection::TopK(opts.top_k.max(1)))
}

fn map_pair(trace: &Trace, target: TokenId, selection: &HeadSelection) -> Result<Option<MapPair>> {
    if trace.position_map().visual().is_none() {
        return Ok(None);
    }
    let logprob = patch_score_map(trace, target, selection)?;
    let avg_attention = average_attention_map(trace)?;
    let shared_scaling = logprob.normalization.union(&avg_attention.normalization);
    Ok(Some(MapPair {
        logprob,
        avg_attention,
        shared_scaling,
    }))
}

fn summaries(scores: &HeadScores, k: usize) -> Vec<HeadSummary> {
    let total: f64 = scores.values.iter().map(|s| s.max(0.0)).sum();
    scores
        .top_k(k)
        .into_iter()
        .map(|head| {
            let score = scores.get(head);
            HeadSummary {
                head,
                score,
                share: if total > 0.0 {
                    score.max(0.0) / total
                } else {
                    0.0
                },
            }
        })
        .collect()
}

/// Prepares the input, runs one instrumented pass, attributes the predicted
/// (or requested) token and greedily completes the answer with plain passes.
pub fn analyze(
    handle: &ModelHandle,
    encoder: Option<&dyn VisionEncoder>,
    templates: &Templates,
    req: &AnalyzeRequest,
) -> Result<Analysis> {
    let model = handle.model().clone();
    if req.question.trim().is_empty() {
        return Err(Error::input("question: must not be empty"));
    }
    if req.image.is_some() && req.context.is_some() {
        return Err(Error::input(
            "give either an image or a textual context, not both",
        ));
    }
    let opts = &req.options;
    let timed = !opts.deterministic;
    let t0 = Stopwatch::start(timed);
    let prepared = match &req.image {
        Some(bytes) => {
            let encoder = encoder.ok_or_else(|| {
                Error::Capability(format!("model `{}` has no vision encoder", model.id()))
            })?;
            prepare_vqa_input(&model, encoder, templates, bytes, &req.question)?
        }
        None => prepare_text(&model, templates, req)?,
    };
    let prepare_ms = t0.ms();

    let t1 = Stopwatch::start(timed);
    let trace = handle.run_traced(&prepared.input, &prepared.position_map, opts.capture)?;
    let trace_ms = t1.ms();

    let t2 = Stopwatch::start(timed);
    let predicted = trace.predicted_token();
    let target = match &opts.target {
        Some(spec) => parse_target(&model, spec)?,
        None => predicted,
    };
    let attr = Attributor::new(&trace, target)?;
    let scores = attr.all_heads()?;
    let top_heads = summaries(&scores, opts.top_k.max(1));
    let selection = head_selection(opts);
    selection.resolve(&scores)?;
    let maps = map_pair(&trace, target, &selection)?;
    let logits: Vec<f64> = trace.logits().iter().map(|&z| f64::from(z)).collect();
    let target_log_prob = crate::numeric::log_softmax(&logits)[target as usize];
    let attribution_ms = t2.ms();

    // The first answer token comes from the traced pass.
    let t3 = Stopwatch::start(timed);
    let eos: Vec<TokenId> = model.vocab().eos().into_iter().collect();
    let mut answer_ids = vec![predicted];
    if !eos.contains(&predicted) && opts.max_new_tokens > 1 {
        let mut input = prepared.input.clone();
        input.tokens.push(predicted);
        answer_ids.extend(handle.generate_greedy(&input, opts.max_new_tokens - 1, &eos)?);
    }
    let generation = answer_ids.len() as u64 - 1;
    let generation_ms = t3.ms();
    let shown: Vec<TokenId> = answer_ids
        .iter()
        .copied()
        .filter(|t| !eos.contains(t))
        .collect();

    let response = AnalyzeResponse {
        schema: ANALYZE_SCHEMA.into(),
        model_id: model.id().to_owned(),
        prompt: prepared.prompt.clone(),
        answer: model.vocab().decode(&shown),
        answer_tokens: answer_ids
            .iter()
            .map(|&t| TokenInfo::of(&model, t))
            .collect(),
        predicted: TokenInfo::of(&model, predicted),
        target: TokenInfo::of(&model, target),
        target_log_prob,
        top_heads,
        grid: prepared.position_map.grid(),
        visual_span: prepared.position_map.visual_span(),
        maps,
        passes: PassCount {
            traced: 1,
            generation,
        },
        timing: timed.then_some(Timing {
            prepare_ms,
            trace_ms,
            attribution_ms,
            generation_ms,
        }),
        session: None,
        heatmaps: None,
    };
    Ok(Analysis {
        prepared,
        trace,
        response,
        target,
    })
}

/// Picks a position directly or through its patch cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionRef {
    Position(usize),
    Cell([usize; 2]),
    Last,
}

/// Vector read off the cached trace at a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum VectorSource {
    LayerInput { layer: usize },
    ValueOutput { head: HeadId },
    PositionContribution { head: HeadId },
}

fn default_space() -> Space {
    Space::Unembedding
}

fn default_projection_k() -> usize {
    crate::projection::DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeRequest {
    /// Per-position scores of one head.
    HeadPositions {
        head: HeadId,
        #[serde(default)]
        target: Option<String>,
    },
    /// Token ranking of a vector at a position.
    Project {
        at: PositionRef,
        vector: VectorSource,
        #[serde(default = "default_space")]
        space: Space,
        #[serde(default = "default_projection_k")]
        top_k: usize,
    },
    /// Head ranking and maps for a different target token.
    Retarget {
        target: String,
        #[serde(default)]
        heads: Option<HeadSelection>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProbeResult {
    HeadPositions {
        head: HeadId,
        target: TokenInfo,
        head_score: f64,
        scores: Vec<f64>,
        map: Option<PatchScoreMap>,
    },
    Project {
        position: usize,
        cell: Option<[usize; 2]>,
        projection: ProjectionSlice,
    },
    Retarget {
        target: TokenInfo,
        top_heads: Vec<HeadSummary>,
        maps: Option<MapPair>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub schema: String,
    /// Model passes spent on this probe; always zero.
    pub passes: u64,
    pub result: ProbeResult,
}

impl Analysis {
    pub fn target(&self) -> TokenId {
        self.target
    }

    fn model(&self) -> &Model {
        self.trace.model()
    }

    fn resolve(&self, at: PositionRef) -> Result<(usize, Option<[usize; 2]>)> {
        let map = self.trace.position_map();
        match at {
            PositionRef::Position(p) => {
                self.trace.check_position(p)?;
                Ok((p, map.cell_of(p).map(|(r, c)| [r, c])))
            }
            PositionRef::Cell([r, c]) => {
                let grid = map
                    .grid()
                    .ok_or_else(|| Error::input("input has no image"))?;
                let p = map.position_of(r, c).ok_or_else(|| {
                    Error::index(format!(
                        "cell ({r}, {c}) outside the {}x{} grid",
                        grid.rows, grid.cols
                    ))
                })?;
                Ok((p, Some([r, c])))
            }
            PositionRef::Last => Ok((self.trace.last_position(), None)),
        }
    }

    /// Answers a probe from the cached trace.
    pub fn probe(&self, req: &ProbeRequest) -> Result<ProbeResponse> {
        let model = self.model();
        let result = match req {
            ProbeRequest::HeadPositions { head, target } => {
                let target = match target {
                    Some(t) => parse_target(model, t)?,
                    None => self.target,
                };
                let attr = Attributor::new(&self.trace, target)?;
                let scores = attr.positions(*head)?;
                let map = match self.trace.position_map().visual_span() {
                    Some(_) => Some(patch_score_map(
                        &self.trace,
                        target,
                        &HeadSelection::Explicit(vec![*head]),
                    )?),
                    None => None,
                };
                ProbeResult::HeadPositions {
                    head: *head,
                    target: TokenInfo::of(model, target),
                    head_score: attr.head(*head)?,
                    scores,
                    map,
                }
            }
            ProbeRequest::Project {
                at,
                vector,
                space,
                top_k,
            } => {
                let (position, cell) = self.resolve(*at)?;
                let (v, source) = match *vector {
                    VectorSource::LayerInput { layer } => (
                        self.trace.residual_at(layer, position)?,
                        Provenance::LayerInput { layer, position },
                    ),
                    VectorSource::ValueOutput { head } => (
                        self.trace.value_output(head, position)?,
                        Provenance::ValueOutput { head, position },
                    ),
                    VectorSource::PositionContribution { head } => (
                        self.trace.position_contribution(head, position)?,
                        Provenance::PositionContribution { head, position },
                    ),
                };
                let p = project(model, v.view(), *space, source)?;
                ProbeResult::Project {
                    position,
                    cell,
                    projection: p.slice(*top_k, model.vocab()),
                }
            }
            ProbeRequest::Retarget { target, heads } => {
                let target = parse_target(model, target)?;
                let scores = Attributor::new(&self.trace, target)?.all_heads()?;
                let k = self.response.top_heads.len().max(1);
                let selection = heads.clone().unwrap_or(HeadSelection::TopK(k));
                ProbeResult::Retarget {
                    target: TokenInfo::of(model, target),
                    top_heads: summaries(&scores, k),
                    maps: map_pair(&self.trace, target, &selection)?,
                }
            }
        };
        Ok(ProbeResponse {
            schema: PROBE_SCHEMA.into(),
            passes: 0,
            result,
        })
    }

    /// Overlay for one map; `shared` uses the range spanning both maps.
    pub fn heatmap(&self, method: MapMethod, shared: bool) -> Result<Option<HeatmapRender>> {
        let (Some(maps), Some(image)) = (&self.response.maps, &self.prepared.image) else {
            return Ok(None);
        };
        let map = match method {
            MapMethod::Logprob => &maps.logprob,
            MapMethod::AvgAttention => &maps.avg_attention,
        };
        render_heatmap(image, map, shared.then_some(maps.shared_scaling)).map(Some)
    }
}
