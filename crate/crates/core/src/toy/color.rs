// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small world of colored animals, asked about in text or in pictures.
//!
//! Textual prompts state one or two facts (`"Dog is brown."`) and ask for the
//! color of one of the animals. Pictures are synthetic scenes read by
//! [`ShapeColorEncoder`]; each labelled patch enters the model as
//! `E[color] + E[animal]`, so the answer has to be fetched from the right
//! patches.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{accuracy, AdamW, Example, Params, ToyArch, Trainer};
use crate::error::Result;
use crate::mm::prepare::{color_question, render_tqa};
use crate::mm::scene::{Scene, COLORS, TEXT_ANIMALS};
use crate::mm::template::{render, Templates, Value};
use crate::mm::{ShapeColorEncoder, BACKGROUND_TOKEN};
use crate::model::{GridDims, Model, TokenId, VisionConfig, Vocabulary, BOS, EOS, IMAGE, UNK};

pub const TOY_COLOR_ID: &str = "toy-color";
pub const TOY_COLOR_REFERENCE_ID: &str = "toy-color-24x24";

const WORDS: [&str; 15] = [
    ".", "?", ":", ",", "is", "Q", "A", "What", "the", "color", "of", "animal", "in", "this",
    "picture",
];

/// Vocabulary shared by every toy color model.
pub fn color_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = [BOS, EOS, UNK, IMAGE, BACKGROUND_TOKEN]
        .iter()
        .chain(WORDS.iter())
        .chain(TEXT_ANIMALS.iter())
        .map(|s| s.to_string())
        .collect();
    tokens.extend(COLORS.iter().map(|c| c.name.to_owned()));
    Vocabulary::new(tokens).expect("toy vocabulary is unique")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Color question over textual facts.
    Text,
    /// Color question over a picture with one or two animals.
    PictureColor,
    /// "What is the animal in this picture?" over a single animal.
    PictureAnimal,
}

#[derive(Debug, Clone)]
pub struct ColorWorld {
    pub arch: ToyArch,
    pub vision: VisionConfig,
    pub templates: Templates,
    /// Sampling weights of [`TaskKind::Text`], `PictureColor`, `PictureAnimal`.
    pub mix: [f64; 3],
    pub batch: usize,
    pub opt: AdamW,
}

impl Default for ColorWorld {
    fn default() -> Self {
        let vocab = color_vocabulary();
        Self {
            arch: ToyArch {
                vocab_size: vocab.len(),
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                head_dim: 8,
                d_ff: Some(64),
                max_positions: 96,
                norm_eps: 1e-6,
            },
            vision: VisionConfig {
                grid: GridDims::new(8, 8),
                patch_size: 14,
            },
            templates: Templates::builtin(),
            mix: [0.55, 0.35, 0.1],
            batch: 32,
            opt: AdamW {
                lr: 3e-3,
                steps: 12000,
                warmup: 200,
                ..AdamW::default()
            },
        }
    }
}

fn id(vocab: &Vocabulary, word: &str) -> TokenId {
    vocab.id(word).expect("toy word in vocabulary")
}

impl ColorWorld {
    pub fn vocabulary(&self) -> Vocabulary {
        color_vocabulary()
    }

    fn pick_kind(&self, rng: &mut ChaCha8Rng) -> TaskKind {
        let total: f64 = self.mix.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (w, k) in self.mix.iter().zip([
            TaskKind::Text,
            TaskKind::PictureColor,
            TaskKind::PictureAnimal,
        ]) {
            if u < *w {
                return k;
            }
            u -= w;
        }
        TaskKind::PictureAnimal
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Example {
        let kind = self.pick_kind(rng);
        self.sample_kind(kind, rng)
    }

    pub fn sample_kind(&self, kind: TaskKind, rng: &mut ChaCha8Rng) -> Example {
        match kind {
            TaskKind::Text => self.sample_text(rng),
            TaskKind::PictureColor => {
                let n = rng.random_range(1..=2);
                self.sample_picture(n, true, rng)
            }
            TaskKind::PictureAnimal => self.sample_picture(1, false, rng),
        }
    }

    fn sample_text(&self, rng: &mut ChaCha8Rng) -> Example {
        let vocab = self.vocabulary();
        let n = rng.random_range(1..=2);
        let animals: Vec<&str> = TEXT_ANIMALS.choose_multiple(rng, n).copied().collect();
        let colors: Vec<&str> = COLORS.choose_multiple(rng, n).map(|c| c.name).collect();
        let facts: Vec<(&str, &str)> = animals
            .iter()
            .copied()
            .zip(colors.iter().copied())
            .collect();
        let ask = rng.random_range(0..n);
        let rendered =
            render_tqa(&vocab, &self.templates, &facts, animals[ask]).expect("toy prompt");
        let mut tokens = vec![id(&vocab, BOS)];
        tokens.extend(rendered.tokens);
        let last = tokens.len() - 1;
        let answer = id(&vocab, colors[ask]);
        tokens.push(answer);
        Example {
            tokens,
            bags: Vec::new(),
            targets: vec![(last, answer), (last + 1, id(&vocab, EOS))],
        }
    }

    /// A rendered scene and the question/answer pair used for training.
    pub fn sample_scene(&self, n: usize, rng: &mut ChaCha8Rng) -> Scene {
        loop {
            if let Ok(scene) = Scene::random(self.vision.grid, self.vision.patch_size, n, rng) {
                return scene;
            }
        }
    }

    fn sample_picture(&self, n: usize, ask_color: bool, rng: &mut ChaCha8Rng) -> Example {
        let vocab = self.vocabulary();
        let scene = self.sample_scene(n, rng);
        let encoder = ShapeColorEncoder::new(self.vision);
        let labels = encoder
            .labels(&scene.render())
            .expect("scene matches the grid");
        let bags = labels.bags(&vocab).expect("toy vocabulary covers labels");
        let object = scene.objects.choose(rng).expect("scene has objects");
        let (question, answer) = if ask_color {
            let q = color_question(&vocab, &self.templates, &object.animal).expect("toy question");
            (q, object.color.as_str())
        } else {
            let q = render(
                &vocab,
                &self.templates.animal_question,
                &[("animal", Value::Text(&object.animal))],
            )
            .expect("toy question");
            (q, object.animal.as_str())
        };
        let prompt = render(
            &vocab,
            &self.templates.vqa,
            &[("question", Value::Fragment(&question))],
        )
        .expect("toy prompt");
        let mut tokens = vec![id(&vocab, BOS)];
        let start = tokens.len();
        tokens.extend(std::iter::repeat_n(id(&vocab, IMAGE), bags.len()));
        tokens.extend(prompt.tokens);
        let last = tokens.len() - 1;
        let answer = id(&vocab, answer);
        tokens.push(answer);
        Example {
            tokens,
            bags: bags
                .into_iter()
                .enumerate()
                .map(|(i, b)| (start + i, b))
                .collect(),
            targets: vec![(last, answer), (last + 1, id(&vocab, EOS))],
        }
    }

    /// Held-out accuracy per task kind, on `n` fresh samples each.
    pub fn evaluate(&self, params: &Params, n: usize, seed: u64) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            TaskKind::Text,
            TaskKind::PictureColor,
            TaskKind::PictureAnimal,
        ]
        .map(|k| {
            let xs: Vec<Example> = (0..n)
                .map(|_| {
                    let mut e = self.sample_kind(k, &mut rng);
                    e.targets.truncate(1);
                    e
                })
                .collect();
            accuracy(&self.arch, params, &xs)
        })
    }

    /// Trains a model. `progress` sees `(step, loss)` every 100 steps.
    pub fn train(
        &self,
        seed: u64,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<(Model, [f64; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_105);
        let mut trainer = Trainer::new(self.arch.clone(), self.opt, seed);
        let mut running = 0.0;
        for step in 0..self.opt.steps {
            let batch: Vec<Example> = (0..self.batch).map(|_| self.sample(&mut rng)).collect();
            running += trainer.step(&batch);
            if step % 100 == 99 {
                progress(step + 1, running / 100.0);
                running = 0.0;
            }
        }
        let acc = self.evaluate(&trainer.params, 200, seed.wrapping_add(1));
        let model = trainer.params.to_model(
            &self.arch,
            self.vocabulary(),
            TOY_COLOR_ID,
            Some(self.vision),
        )?;
        Ok((model, acc))
    }

    /// Untrained model over the same vocabulary with a 24x24 patch grid, for
    /// exercising reference-scale geometry.
    pub fn reference_geometry_model(&self, seed: u64) -> Result<Model> {
        let vision = VisionConfig {
            grid: GridDims::new(24, 24),
            patch_size: 14,
        };
        let arch = ToyArch {
            max_positions: 1 + vision.grid.cells() + 32,
            ..self.arch.clone()
        };
        Params::init(&arch, seed).to_model(
            &arch,
            self.vocabulary(),
            TOY_COLOR_REFERENCE_ID,
            Some(vision),
        )
    }
}

static BUILTIN: &[u8] = include_bytes!("../../assets/toy-color.plm");

/// The trained toy color model shipped with the crate.
pub fn builtin_color_model() -> Result<Model> {
    Model::read_from(BUILTIN)
}
