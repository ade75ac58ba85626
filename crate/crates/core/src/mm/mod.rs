// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image-question front end: synthetic scenes, the patch encoder interface,
//! prompt templates, input preparation and heatmap overlays.

pub mod encoder;
pub mod heatmap;
pub mod prepare;
pub mod scene;
pub mod template;

pub use encoder::{
    decode_image, mask_cells, preprocess, ConstantEncoder, PatchLabels, ShapeColorEncoder,
    VisionEncoder, BACKGROUND_TOKEN,
};
pub use heatmap::{encode_png, render_heatmap, HeatmapRender};
pub use prepare::{
    prepare_tqa_facts, prepare_tqa_input, prepare_vqa_image, prepare_vqa_input, PreparedInput,
    COLOR_MARK, CONTEXT_ANIMAL_MARK, QUESTION_ANIMAL_MARK,
};
pub use scene::{Scene, SceneObject, Shape, COLORS, IMAGE_ANIMALS, TEXT_ANIMALS};
pub use template::{Rendered, Templates, Value};
