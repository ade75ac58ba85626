// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer: configuration, parameters, vocabulary and a
//! reference forward pass.

mod archive;
mod config;
mod forward;
mod handle;
mod vocab;
mod weights;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1};

pub use archive::Archive;
pub use config::{FfnKind, GridDims, ModelConfig, NormKind, Positional, VisionConfig};
pub(crate) use forward::{forward, CaptureSpec};
pub use forward::{ModelInput, VisualBlock};
pub use handle::{ModelHandle, PassCounters, RunQueue};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, IMAGE, UNK};
pub use weights::{AttentionWeights, FfnWeights, LayerWeights, ModelWeights, Norm};

use crate::error::{Error, Result};
use crate::numeric::log_softmax;

pub const MODEL_FORMAT: &str = "patchlens-model-v1";

/// A loaded model. Immutable once built.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    weights: ModelWeights,
    wide: OnceLock<WideMatrices>,
}

/// Double-precision copies of `E` and `E_u` used by the analysis code.
#[derive(Debug)]
struct WideMatrices {
    embed: Array2<f64>,
    unembed: Array2<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::shape(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        weights.validate(&config)?;
        Ok(Self {
            config,
            vocab,
            weights,
            wide: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn id(&self) -> &str {
        &self.config.model_id
    }

    fn wide(&self) -> &WideMatrices {
        self.wide.get_or_init(|| WideMatrices {
            embed: self.weights.embed.mapv(f64::from),
            unembed: self.weights.unembedding().mapv(f64::from),
        })
    }

    /// `E` in double precision, `(vocab, d_model)`.
    pub fn embedding_f64(&self) -> &Array2<f64> {
        &self.wide().embed
    }

    /// `E_u` in double precision, `(vocab, d_model)`.
    pub fn unembedding_f64(&self) -> &Array2<f64> {
        &self.wide().unembed
    }

    /// Vocabulary logits of a residual-space vector: final normalization,
    /// then `E_u`.
    pub fn output_logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let normed = self.weights.final_norm.apply_f64(x);
        self.unembedding_f64().dot(&normed)
    }

    pub fn output_log_probs(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let logits = self.output_logits(x);
        log_softmax(logits.as_slice().expect("contiguous logits"))
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::index(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )))
        }
    }

    pub fn to_archive(&self) -> Archive {
        let metadata = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
        });
        let mut archive = Archive::new(MODEL_FORMAT, metadata);
        archive.arrays = self.weights.to_named();
        archive
    }

    pub fn from_archive(archive: Archive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(archive.metadata["config"].clone())?;
        let vocab: Vocabulary = serde_json::from_value(archive.metadata["vocab"].clone())?;
        let weights = ModelWeights::from_named(&config, archive.arrays)?;
        Self::new(config, vocab, weights)
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        self.to_archive().write_to(writer)
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        Self::from_archive(Archive::read_from(reader, MODEL_FORMAT)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
