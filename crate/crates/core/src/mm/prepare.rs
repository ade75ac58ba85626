// SPDX-License-Identifier: MIT OR Apache-2.0

//! Building model inputs for textual and visual color questions.

use image::{DynamicImage, RgbImage};

use super::encoder::{decode_image, preprocess, VisionEncoder};
use super::template::{render, Rendered, Templates, Value};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput, TokenId, VisualBlock, Vocabulary};
use crate::trace::{PositionMap, Span, VisualSpan};

/// Mark naming the color word of the textual context.
pub const COLOR_MARK: &str = "color";
/// Mark naming the animal the context sentence talks about.
pub const CONTEXT_ANIMAL_MARK: &str = "context_animal";
/// Mark naming the animal the question asks about.
pub const QUESTION_ANIMAL_MARK: &str = "question_animal";

/// A model input with its position bookkeeping and, for visual questions, the
/// image exactly as the encoder saw it.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub input: ModelInput,
    pub position_map: PositionMap,
    /// Text after the visual span (or the whole prompt).
    pub prompt: String,
    pub image: Option<RgbImage>,
}

impl PreparedInput {
    pub fn tokens(&self) -> &[TokenId] {
        &self.input.tokens
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// The visual embedding block, if any.
    pub fn visual_block(&self) -> Option<&ndarray::Array2<f32>> {
        self.input.visual.as_ref().map(|v| &v.embeddings)
    }

    pub fn color_position(&self) -> Option<Span> {
        self.position_map.mark(COLOR_MARK)
    }
}

fn shift(r: &std::ops::Range<usize>, offset: usize) -> Span {
    Span::new(r.start + offset, r.end + offset)
}

fn with_marks(mut map: PositionMap, rendered: &Rendered, offset: usize) -> Result<PositionMap> {
    for (slot, mark) in [
        ("color", COLOR_MARK),
        ("context", CONTEXT_ANIMAL_MARK),
        ("animal", QUESTION_ANIMAL_MARK),
    ] {
        if let Some(r) = rendered.span(slot) {
            map = map.with_mark(mark, shift(&r, offset))?;
        }
    }
    Ok(map)
}

fn check_nonempty(name: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(Error::input(format!("{name} must not be empty")))
    } else {
        Ok(())
    }
}

fn check_budget(model: &Model, len: usize) -> Result<()> {
    match model.config().max_positions() {
        Some(max) if len > max => Err(Error::input(format!(
            "prompt needs {len} positions, context budget is {max}"
        ))),
        _ => Ok(()),
    }
}

/// Renders the question text `"What is the color of the {animal}?"`.
pub fn color_question(vocab: &Vocabulary, templates: &Templates, animal: &str) -> Result<Rendered> {
    check_nonempty("question animal", animal)?;
    render(
        vocab,
        &templates.color_question,
        &[("animal", Value::Text(animal))],
    )
}

/// Renders the facts and color question of a textual prompt. The first fact
/// supplies the `color` and `context` spans.
pub fn render_tqa(
    vocab: &Vocabulary,
    templates: &Templates,
    facts: &[(&str, &str)],
    question_animal: &str,
) -> Result<Rendered> {
    if facts.is_empty() {
        return Err(Error::input("a textual prompt needs at least one fact"));
    }
    let mut parts = Vec::with_capacity(facts.len());
    for &(animal, color) in facts {
        check_nonempty("animal", animal)?;
        check_nonempty("color", color)?;
        parts.push(render(
            vocab,
            &templates.fact,
            &[
                ("context", Value::Text(animal)),
                ("color", Value::Text(color)),
            ],
        )?);
    }
    let facts = Rendered::join(&parts);
    let question = color_question(vocab, templates, question_animal)?;
    render(
        vocab,
        &templates.tqa,
        &[
            ("facts", Value::Fragment(&facts)),
            ("question", Value::Fragment(&question)),
        ],
    )
}

fn bos_prefix(vocab: &Vocabulary) -> Vec<TokenId> {
    vocab.bos().into_iter().collect()
}

/// `"{Animal} is {color}. Q: What is the color of the {question_animal}? A:"`
/// with the color word and both animals marked.
pub fn prepare_tqa_input(
    model: &Model,
    templates: &Templates,
    animal: &str,
    color: &str,
    question_animal: &str,
) -> Result<PreparedInput> {
    prepare_tqa_facts(model, templates, &[(animal, color)], question_animal)
}

pub fn prepare_tqa_facts(
    model: &Model,
    templates: &Templates,
    facts: &[(&str, &str)],
    question_animal: &str,
) -> Result<PreparedInput> {
    let vocab = model.vocab();
    let rendered = render_tqa(vocab, templates, facts, question_animal)?;
    let mut tokens = bos_prefix(vocab);
    let offset = tokens.len();
    tokens.extend_from_slice(&rendered.tokens);
    check_budget(model, tokens.len())?;
    let map = PositionMap::new(tokens.len(), None, Span::new(offset, tokens.len()))?;
    let map = with_marks(map, &rendered, offset)?;
    Ok(PreparedInput {
        input: ModelInput::text(tokens),
        position_map: map,
        prompt: rendered.text,
        image: None,
    })
}

/// Decodes `image_bytes` and builds `<bos> <img>* Q: {question} A:`.
pub fn prepare_vqa_input(
    model: &Model,
    encoder: &dyn VisionEncoder,
    templates: &Templates,
    image_bytes: &[u8],
    question: &str,
) -> Result<PreparedInput> {
    check_nonempty("question", question)?;
    let image = decode_image(image_bytes)?;
    prepare_vqa_image(model, encoder, templates, &image, Value::Text(question))
}

/// Like [`prepare_vqa_input`] for an already decoded image. A rendered
/// question keeps its `animal` span as the question-animal mark.
pub fn prepare_vqa_image(
    model: &Model,
    encoder: &dyn VisionEncoder,
    templates: &Templates,
    image: &DynamicImage,
    question: Value<'_>,
) -> Result<PreparedInput> {
    let vision = model
        .config()
        .vision
        .ok_or_else(|| Error::Capability(format!("model `{}` takes no images", model.id())))?;
    if encoder.vision() != vision {
        return Err(Error::shape(format!(
            "encoder `{}` produces {:?}, model expects {:?}",
            encoder.name(),
            encoder.vision(),
            vision
        )));
    }
    let vocab = model.vocab();
    let placeholder = vocab
        .image()
        .ok_or_else(|| Error::Capability("vocabulary has no image placeholder".into()))?;
    let rendered = render(vocab, &templates.vqa, &[("question", question)])?;

    let mut tokens = bos_prefix(vocab);
    let start = tokens.len();
    let cells = vision.grid.cells();
    tokens.extend(std::iter::repeat_n(placeholder, cells));
    let offset = tokens.len();
    tokens.extend_from_slice(&rendered.tokens);
    check_budget(model, tokens.len())?;

    let pixels = preprocess(image, vision.image_size());
    let block = encoder.encode(&pixels)?;
    if block.dim() != (cells, model.config().d_model) {
        return Err(Error::shape(format!(
            "encoder returned a {:?} block, expected ({cells}, {})",
            block.dim(),
            model.config().d_model
        )));
    }
    let visual = VisualSpan {
        start,
        grid: vision.grid,
    };
    let map = PositionMap::new(tokens.len(), Some(visual), Span::new(offset, tokens.len()))?;
    let map = with_marks(map, &rendered, offset)?;
    Ok(PreparedInput {
        input: ModelInput {
            tokens,
            visual: Some(VisualBlock {
                start,
                embeddings: block,
            }),
        },
        position_map: map,
        prompt: rendered.text,
        image: Some(pixels),
    })
}
