// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evidence pipelines over annotated cases.

use std::collections::BTreeSet;

use image::DynamicImage;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::CaseAnnotation;
use super::report::{fingerprint, EvidenceReport, ReportBuilder, StatKind};
use crate::attribution::{patch_score_map, Attributor, HeadProfile, HeadSelection, LogitMinus};
use crate::error::{Error, Result};
use crate::mm::prepare::{color_question, prepare_tqa_input, prepare_vqa_image, PreparedInput};
use crate::mm::scene::{COLORS, TEXT_ANIMALS};
use crate::mm::template::{render, slots, Templates, Value};
use crate::mm::{mask_cells, preprocess, VisionEncoder, COLOR_MARK};
use crate::model::{Model, ModelHandle, TokenId};
use crate::numeric::argsort_desc;
use crate::projection::{project, rank_of, Provenance, Space, TokenTarget};
use crate::trace::{CaptureOptions, HeadId, Span, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceConfig {
    /// Heads analyzed per case, by descending score.
    pub top_heads: usize,
    /// Visual positions analyzed per case, by summed score over the top heads.
    pub top_positions: usize,
    pub seed: u64,
    /// Only analyze cases whose predicted token is the expected answer.
    pub gate_correct: bool,
    /// Space for projecting layer inputs.
    pub layer_input_space: Space,
    pub capture: CaptureOptions,
    /// Pools for the random color and animal baselines.
    pub colors: Vec<String>,
    pub animals: Vec<String>,
    /// Question for the alternate probe; `{animal}` is optional.
    pub alt_question: Option<String>,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            top_heads: 10,
            top_positions: 20,
            seed: 0,
            gate_correct: true,
            layer_input_space: Space::Embedding,
            capture: CaptureOptions::default(),
            colors: COLORS.iter().map(|c| c.name.to_owned()).collect(),
            animals: TEXT_ANIMALS.iter().map(|a| a.to_string()).collect(),
            alt_question: None,
        }
    }
}

/// Everything a pipeline needs besides the cases.
pub struct Experiment<'a> {
    pub handle: &'a ModelHandle,
    pub encoder: Option<&'a dyn VisionEncoder>,
    pub templates: &'a Templates,
    pub config: &'a EvidenceConfig,
}

enum Outcome {
    Included,
    Excluded(&'static str),
}

/// Running sum of head scores for the mean profile.
struct ProfileSum {
    sum: Vec<f64>,
    n: usize,
}

impl ProfileSum {
    fn new(model: &Model) -> Self {
        Self {
            sum: vec![0.0; model.config().total_heads()],
            n: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(values) {
            *s += v;
        }
        self.n += 1;
    }

    fn finish(self, model: &Model) -> Option<HeadProfile> {
        if self.n == 0 {
            return None;
        }
        let mean = self.sum.iter().map(|s| s / self.n as f64).collect();
        let c = model.config();
        HeadProfile::from_mean_scores(model.id(), c.n_layers, c.n_heads, self.n, mean).ok()
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Draws a pool entry different from every label in `exclude`.
fn draw<'p>(pool: &'p [String], exclude: &[&str], rng: &mut ChaCha8Rng) -> Result<&'p str> {
    let options: Vec<&String> = pool
        .iter()
        .filter(|p| !exclude.iter().any(|e| e.trim().eq_ignore_ascii_case(p)))
        .collect();
    options
        .choose(rng)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::input("baseline pool has no entry disjoint from the case labels"))
}

fn first_id(t: &TokenTarget) -> TokenId {
    *t.ids.iter().next().expect("targets are non-empty")
}

impl Experiment<'_> {
    fn model(&self) -> &Model {
        self.handle.model()
    }

    fn fingerprint(&self, pipeline: &str, cases: &[CaseAnnotation]) -> String {
        fingerprint(&serde_json::json!({
            "pipeline": pipeline,
            "config": self.config,
            "templates": self.templates,
            "model": self.model().config(),
            "encoder": self.encoder.map(|e| e.name()),
            "cases": cases,
        }))
    }

    fn trace(&self, p: &PreparedInput) -> Result<Trace> {
        self.handle
            .run_traced(&p.input, &p.position_map, self.config.capture)
    }

    fn target(&self, word: &str) -> Result<TokenTarget> {
        TokenTarget::new(self.model().vocab(), word)
    }

    /// The token attribution is computed for, or `None` when gated out.
    fn answer_token(&self, trace: &Trace, target: &TokenTarget) -> Option<TokenId> {
        let predicted = trace.predicted_token();
        if target.ids.contains(&predicted) {
            Some(predicted)
        } else if self.config.gate_correct {
            None
        } else {
            Some(first_id(target))
        }
    }

    fn rr(
        &self,
        vector: ndarray::ArrayView1<f64>,
        space: Space,
        target: &TokenTarget,
    ) -> Result<f64> {
        let p = project(self.model(), vector, space, Provenance::Vector)?;
        Ok(1.0 / rank_of(&p, target)? as f64)
    }

    fn logit_minus(
        &self,
        vector: ndarray::ArrayView1<f64>,
        space: Space,
        a: TokenId,
        b: TokenId,
    ) -> Result<f64> {
        let p = project(self.model(), vector, space, Provenance::Vector)?;
        match space {
            Space::Unembedding => Ok(LogitMinus::from_logits(p.logits(), a, b)?.log_prob),
            Space::Embedding => Ok(p.logit(a) - p.logit(b)),
        }
    }

    fn load_image(&self, case: &CaseAnnotation) -> Result<Option<DynamicImage>> {
        match &case.image {
            None => Ok(None),
            Some(path) => Ok(Some(image::open(path)?)),
        }
    }

    /// Textual color questions with the original and both swapped prompts.
    pub fn run_tqa(&self, cases: &[CaseAnnotation]) -> Result<EvidenceReport> {
        let mut b = ReportBuilder::default();
        for (name, kind) in [
            ("a.color_position_share_pct", StatKind::Percent),
            ("b.mrr_correct_color", StatKind::Mrr),
            ("b.mrr_random_color", StatKind::Mrr),
            ("b.logit_minus_correct_vs_random", StatKind::LogitDiff),
            ("c.s0_mrr_animal", StatKind::Mrr),
            ("c.s0_mrr_distractor", StatKind::Mrr),
            ("c.s0_logit_diff_animal_vs_distractor", StatKind::LogitDiff),
            ("c.s1_mrr_animal", StatKind::Mrr),
            ("c.s1_mrr_distractor", StatKind::Mrr),
            ("c.s1_logit_diff_animal_vs_distractor", StatKind::LogitDiff),
            ("d.s0_color_attention", StatKind::Attention),
            ("d.s1_color_attention", StatKind::Attention),
            ("d.s2_color_attention", StatKind::Attention),
        ] {
            b.declare(name, kind);
        }
        let mut profile = ProfileSum::new(self.model());
        for (i, case) in cases.iter().enumerate() {
            match self.tqa_case(i, case, &mut b, &mut profile)? {
                Outcome::Included => b.included += 1,
                Outcome::Excluded(why) => b.exclude(why),
            }
        }
        let fp = self.fingerprint("tqa", cases);
        let profile = profile.finish(self.model());
        b.finish(
            "tqa",
            self.model().id(),
            fp,
            cases.len(),
            profile,
            self.config.top_heads,
        )
    }

    fn tqa_case(
        &self,
        index: usize,
        case: &CaseAnnotation,
        b: &mut ReportBuilder,
        profile: &mut ProfileSum,
    ) -> Result<Outcome> {
        let model = self.model();
        let (a, a1, c) = (
            case.animal.as_str(),
            case.distractor.as_str(),
            case.color.as_str(),
        );
        let s0 = prepare_tqa_input(model, self.templates, a, c, a)?;
        let t0 = self.trace(&s0)?;
        let color = self.target(c)?;
        let Some(answer) = self.answer_token(&t0, &color) else {
            return Ok(Outcome::Excluded("wrong answer"));
        };
        let s1 = prepare_tqa_input(model, self.templates, a1, c, a)?;
        let s2 = prepare_tqa_input(model, self.templates, a, c, a1)?;
        let (t1, t2) = (self.trace(&s1)?, self.trace(&s2)?);

        let attr = Attributor::new(&t0, answer)?;
        let scores = attr.all_heads()?;
        profile.add(&scores.values);
        let top = scores.top_k(self.config.top_heads);
        let span = s0
            .position_map
            .mark(COLOR_MARK)
            .expect("textual prompts mark the color");
        let color_pos = span.start;

        let mut rng = case_rng(self.config.seed, index);
        let random_color = self.target(draw(&self.config.colors, &[c], &mut rng)?)?;
        let animal = self.target(a)?;
        let distractor = self.target(a1)?;

        let (mut in_span, mut total) = (0.0, 0.0);
        let n = top.len() as f64;
        let mut sums = [0.0f64; 13];
        for &h in &top {
            let pos = attr.positions(h)?;
            for (p, &s) in pos.iter().enumerate() {
                if s > 0.0 {
                    total += s;
                    if span.contains(p) {
                        in_span += s;
                    }
                }
            }
            let vo = t0.value_output(h, color_pos)?;
            sums[0] += self.rr(vo.view(), Space::Unembedding, &color)?;
            sums[1] += self.rr(vo.view(), Space::Unembedding, &random_color)?;
            sums[2] += self.logit_minus(
                vo.view(),
                Space::Unembedding,
                answer,
                first_id(&random_color),
            )?;
            let space = self.config.layer_input_space;
            for (k, t) in [(3, &t0), (6, &t1)] {
                let li = t.residual_at(h.layer, color_pos)?;
                sums[k] += self.rr(li.view(), space, &animal)?;
                sums[k + 1] += self.rr(li.view(), space, &distractor)?;
                sums[k + 2] +=
                    self.logit_minus(li.view(), space, first_id(&animal), first_id(&distractor))?;
            }
            for (k, t) in [(9, &t0), (10, &t1), (11, &t2)] {
                sums[k] += span_attention(t, h, span)?;
            }
        }
        if total > 0.0 {
            b.add("a.color_position_share_pct", 100.0 * in_span / total);
        }
        let names = [
            "b.mrr_correct_color",
            "b.mrr_random_color",
            "b.logit_minus_correct_vs_random",
            "c.s0_mrr_animal",
            "c.s0_mrr_distractor",
            "c.s0_logit_diff_animal_vs_distractor",
            "c.s1_mrr_animal",
            "c.s1_mrr_distractor",
            "c.s1_logit_diff_animal_vs_distractor",
            "d.s0_color_attention",
            "d.s1_color_attention",
            "d.s2_color_attention",
        ];
        for (name, s) in names.iter().zip(sums) {
            b.add(name, s / n);
        }
        Ok(Outcome::Included)
    }

    fn encoder(&self) -> Result<&dyn VisionEncoder> {
        self.encoder
            .ok_or_else(|| Error::Capability("visual questions need a vision encoder".into()))
    }

    fn prepare_color_question(&self, image: &DynamicImage, animal: &str) -> Result<PreparedInput> {
        let q = color_question(self.model().vocab(), self.templates, animal)?;
        prepare_vqa_image(
            self.model(),
            self.encoder()?,
            self.templates,
            image,
            Value::Fragment(&q),
        )
    }

    /// Visual color questions.
    pub fn run_vqa(&self, cases: &[CaseAnnotation]) -> Result<EvidenceReport> {
        self.encoder()?;
        let mut b = ReportBuilder::default();
        for (name, kind) in [
            ("a.argmax_in_mask", StatKind::Fraction),
            ("b.mrr_correct_color", StatKind::Mrr),
            ("b.mrr_random_color", StatKind::Mrr),
            ("b.logit_minus_correct_vs_random", StatKind::LogitDiff),
            ("c.mrr_animal", StatKind::Mrr),
            ("c.mrr_distractor", StatKind::Mrr),
            ("c.logit_diff_animal_vs_distractor", StatKind::LogitDiff),
            ("d.top_position_attention_same_animal", StatKind::Attention),
            ("d.top_position_attention_other_animal", StatKind::Attention),
            ("e.color_mrr", StatKind::Mrr),
            ("e.random_color_mrr", StatKind::Mrr),
            ("e.animal_mrr", StatKind::Mrr),
            ("e.random_animal_mrr", StatKind::Mrr),
            ("e.random_position_color_mrr", StatKind::Mrr),
            ("e.random_position_animal_mrr", StatKind::Mrr),
        ] {
            b.declare(name, kind);
        }
        let mut profile = ProfileSum::new(self.model());
        for (i, case) in cases.iter().enumerate() {
            match self.vqa_case(i, case, &mut b, &mut profile)? {
                Outcome::Included => b.included += 1,
                Outcome::Excluded(why) => b.exclude(why),
            }
        }
        let fp = self.fingerprint("vqa", cases);
        let profile = profile.finish(self.model());
        b.finish(
            "vqa",
            self.model().id(),
            fp,
            cases.len(),
            profile,
            self.config.top_heads,
        )
    }

    fn vqa_case(
        &self,
        index: usize,
        case: &CaseAnnotation,
        b: &mut ReportBuilder,
        profile: &mut ProfileSum,
    ) -> Result<Outcome> {
        let Some(image) = self.load_image(case)? else {
            return Ok(Outcome::Excluded("no image"));
        };
        let (a, a1, c) = (
            case.animal.as_str(),
            case.distractor.as_str(),
            case.color.as_str(),
        );
        let same = self.prepare_color_question(&image, a)?;
        let t0 = self.trace(&same)?;
        let color = self.target(c)?;
        let Some(answer) = self.answer_token(&t0, &color) else {
            return Ok(Outcome::Excluded("wrong answer"));
        };
        let other = self.prepare_color_question(&image, a1)?;
        let t1 = self.trace(&other)?;

        let attr = Attributor::new(&t0, answer)?;
        let scores = attr.all_heads()?;
        profile.add(&scores.values);
        let top = scores.top_k(self.config.top_heads);
        let visual = same.position_map.visual_span().expect("visual input");
        let grid = same.position_map.grid().expect("visual input");

        let mut summed = vec![0.0; visual.len()];
        for &h in &top {
            let pos = attr.positions(h)?;
            for (cell, s) in summed.iter_mut().enumerate() {
                *s += pos[visual.start + cell];
            }
        }
        let mut top_pos: Vec<usize> = argsort_desc(&summed)
            .into_iter()
            .take(self.config.top_positions)
            .map(|cell| visual.start + cell)
            .collect();
        top_pos.sort_unstable();

        if let Some(mask_path) = &case.mask {
            let mask = image::open(mask_path)?;
            let mask = image::DynamicImage::ImageRgb8(preprocess(
                &mask,
                same.image.as_ref().expect("visual input").dimensions(),
            ))
            .to_luma8();
            let cells: BTreeSet<usize> = mask_cells(&mask, grid).into_iter().collect();
            let map = patch_score_map(&t0, answer, &HeadSelection::Explicit(top.clone()))?;
            let (r, col) = map.argmax();
            b.add(
                "a.argmax_in_mask",
                f64::from(u8::from(cells.contains(&(r * grid.cols + col)))),
            );
        }

        let mut rng = case_rng(self.config.seed, index);
        let random_color = self.target(draw(&self.config.colors, &[c], &mut rng)?)?;
        let random_animal = self.target(draw(&self.config.animals, &[a, a1], &mut rng)?)?;
        let animal = self.target(a)?;
        let distractor = self.target(a1)?;
        let space = self.config.layer_input_space;

        let mut sums = [0.0f64; 8];
        let mut pairs = 0usize;
        let (mut att_same, mut att_other) = (0.0, 0.0);
        for &h in &top {
            let (r0, r1) = (t0.attention(h)?, t1.attention(h)?);
            att_same += top_pos.iter().map(|&p| f64::from(r0[p])).sum::<f64>();
            att_other += top_pos.iter().map(|&p| f64::from(r1[p])).sum::<f64>();
            for &p in &top_pos {
                let vo = t0.value_output(h, p)?;
                sums[0] += self.rr(vo.view(), Space::Unembedding, &color)?;
                sums[1] += self.rr(vo.view(), Space::Unembedding, &random_color)?;
                sums[2] += self.logit_minus(
                    vo.view(),
                    Space::Unembedding,
                    answer,
                    first_id(&random_color),
                )?;
                let li = t0.residual_at(h.layer, p)?;
                sums[3] += self.rr(li.view(), space, &animal)?;
                sums[4] += self.rr(li.view(), space, &distractor)?;
                sums[5] +=
                    self.logit_minus(li.view(), space, first_id(&animal), first_id(&distractor))?;
                pairs += 1;
            }
        }
        let n = pairs as f64;
        let names = [
            "b.mrr_correct_color",
            "b.mrr_random_color",
            "b.logit_minus_correct_vs_random",
            "c.mrr_animal",
            "c.mrr_distractor",
            "c.logit_diff_animal_vs_distractor",
        ];
        for (name, s) in names.iter().zip(&sums[..6]) {
            b.add(name, s / n);
        }
        b.add(
            "d.top_position_attention_same_animal",
            (att_same / top.len() as f64).min(1.0),
        );
        b.add(
            "d.top_position_attention_other_animal",
            (att_other / top.len() as f64).min(1.0),
        );

        let all_visual: Vec<usize> = visual.positions().collect();
        let random_pos: Vec<usize> = all_visual
            .choose_multiple(&mut rng, self.config.top_positions.min(all_visual.len()))
            .copied()
            .collect();
        let mut e = [0.0f64; 6];
        for &p in &top_pos {
            let x = t0.residual_at(0, p)?;
            e[0] += self.rr(x.view(), Space::Embedding, &color)?;
            e[1] += self.rr(x.view(), Space::Embedding, &random_color)?;
            e[2] += self.rr(x.view(), Space::Embedding, &animal)?;
            e[3] += self.rr(x.view(), Space::Embedding, &random_animal)?;
        }
        for &p in &random_pos {
            let x = t0.residual_at(0, p)?;
            e[4] += self.rr(x.view(), Space::Embedding, &color)?;
            e[5] += self.rr(x.view(), Space::Embedding, &animal)?;
        }
        let (nt, nr) = (top_pos.len() as f64, random_pos.len() as f64);
        b.add("e.color_mrr", e[0] / nt);
        b.add("e.random_color_mrr", e[1] / nt);
        b.add("e.animal_mrr", e[2] / nt);
        b.add("e.random_animal_mrr", e[3] / nt);
        b.add("e.random_position_color_mrr", e[4] / nr);
        b.add("e.random_position_animal_mrr", e[5] / nr);
        Ok(Outcome::Included)
    }

    /// Attention mass on the annotated animal patches under the alternate
    /// question.
    pub fn run_alt_question(&self, cases: &[CaseAnnotation]) -> Result<EvidenceReport> {
        let encoder = self.encoder()?;
        let question = self
            .config
            .alt_question
            .clone()
            .unwrap_or_else(|| self.templates.animal_question.clone());
        for slot in slots(&question)? {
            if slot != "animal" {
                return Err(Error::input(format!(
                    "alternate question has unknown slot `{slot}`"
                )));
            }
        }
        let mut b = ReportBuilder::default();
        b.declare("animal_patch_attention", StatKind::Attention);
        let mut profile = ProfileSum::new(self.model());
        let vocab = self.model().vocab();
        for case in cases {
            let (Some(image), Some(mask_path)) = (self.load_image(case)?, case.mask.as_ref())
            else {
                b.exclude("no image or mask");
                continue;
            };
            let q = render(vocab, &question, &[("animal", Value::Text(&case.animal))])?;
            let prep = prepare_vqa_image(
                self.model(),
                encoder,
                self.templates,
                &image,
                Value::Fragment(&q),
            )?;
            let trace = self.trace(&prep)?;
            let Some(answer) = self.answer_token(&trace, &self.target(&case.animal)?) else {
                b.exclude("wrong answer");
                continue;
            };
            let attr = Attributor::new(&trace, answer)?;
            let scores = attr.all_heads()?;
            profile.add(&scores.values);
            let top = scores.top_k(self.config.top_heads);
            let grid = prep.position_map.grid().expect("visual input");
            let mask = image::open(mask_path)?;
            let size = prep.image.as_ref().expect("visual input").dimensions();
            let mask = DynamicImage::ImageRgb8(preprocess(&mask, size)).to_luma8();
            let cells = mask_cells(&mask, grid);
            let mut mass = 0.0;
            for &h in &top {
                let row = trace.attention(h)?;
                mass += cells
                    .iter()
                    .map(|&c| {
                        f64::from(
                            row[prep
                                .position_map
                                .position_of(c / grid.cols, c % grid.cols)
                                .expect("cell in grid")],
                        )
                    })
                    .sum::<f64>();
            }
            b.add(
                "animal_patch_attention",
                (mass / top.len() as f64).clamp(0.0, 1.0),
            );
            b.included += 1;
        }
        let fp = fingerprint(&serde_json::json!({
            "base": self.fingerprint("alt-question", cases),
            "question": question,
        }));
        let profile = profile.finish(self.model());
        b.finish(
            "alt-question",
            self.model().id(),
            fp,
            cases.len(),
            profile,
            self.config.top_heads,
        )
    }
}

/// Last-query attention of `head` summed over `span`.
fn span_attention(trace: &Trace, head: HeadId, span: Span) -> Result<f64> {
    let row = trace.attention(head)?;
    Ok(span
        .positions()
        .map(|p| f64::from(row[p]))
        .sum::<f64>()
        .min(1.0))
}
