// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small models and synthetic tasks used by the tests, the desk-scale
//! experiments and the browser demo.

pub mod color;
pub mod induction;
mod random;
pub mod train;

pub use color::{
    builtin_color_model, color_vocabulary, ColorWorld, TaskKind, TOY_COLOR_ID,
    TOY_COLOR_REFERENCE_ID,
};
pub use induction::{InductionCase, InductionTask};
pub use random::{random_model, tiny_config, tiny_config_variant, tiny_vision_config};
pub use train::{AdamW, Example, Params, ToyArch, Trainer};
