// SPDX-License-Identifier: MIT OR Apache-2.0

//! WebAssembly front end for the bundled toy color model.
//!
//! [`Demo`] holds the model and the last analysis; the exported
//! [`Explorer`] wraps it for JavaScript. Probes reuse the cached trace.

use patchlens_core::analysis::{
    analyze, Analysis, AnalyzeOptions, AnalyzeRequest, PositionRef, ProbeRequest, VectorSource,
};
use patchlens_core::attribution::MapMethod;
use patchlens_core::mm::heatmap::encode_png;
use patchlens_core::mm::scene::Scene;
use patchlens_core::mm::template::Templates;
use patchlens_core::mm::{ShapeColorEncoder, VisionEncoder};
use patchlens_core::projection::Space;
use patchlens_core::toy::builtin_color_model;
use patchlens_core::{Error, ModelHandle, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// A freshly drawn scene and its PNG encoding.
#[derive(Debug, Clone, Serialize)]
pub struct SceneView {
    pub scene: Scene,
    #[serde(skip)]
    pub png: Vec<u8>,
}

pub struct Demo {
    handle: ModelHandle,
    encoder: ShapeColorEncoder,
    templates: Templates,
    scene: Option<SceneView>,
    last: Option<Analysis>,
}

impl Demo {
    pub fn new() -> Result<Self> {
        let model = builtin_color_model()?;
        let encoder = ShapeColorEncoder::for_model(&model)?;
        Ok(Self {
            handle: ModelHandle::new(model),
            encoder,
            templates: Templates::builtin(),
            scene: None,
            last: None,
        })
    }

    /// Draws `objects` shapes (1 to 3) from `seed` and makes them current.
    pub fn draw_scene(&mut self, seed: u64, objects: usize) -> Result<&SceneView> {
        if !(1..=3).contains(&objects) {
            return Err(Error::input("objects: must be between 1 and 3"));
        }
        let vision = self.encoder.vision();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = Scene::random(vision.grid, vision.patch_size, objects, &mut rng)?;
        let png = encode_png(&scene.render())?;
        self.last = None;
        Ok(self.scene.insert(SceneView { scene, png }))
    }

    fn options(target: Option<String>) -> AnalyzeOptions {
        AnalyzeOptions {
            target,
            deterministic: true,
            ..AnalyzeOptions::default()
        }
    }

    /// Asks `question` about the current scene.
    pub fn ask_image(&mut self, question: &str, target: Option<String>) -> Result<&Analysis> {
        let image = self
            .scene
            .as_ref()
            .ok_or_else(|| Error::input("draw a scene first"))?
            .png
            .clone();
        let req = AnalyzeRequest {
            question: question.to_owned(),
            context: None,
            image: Some(image),
            options: Self::options(target),
        };
        let analysis = analyze(&self.handle, Some(&self.encoder), &self.templates, &req)?;
        Ok(self.last.insert(analysis))
    }

    /// Asks `question` about a textual context such as "Cat is pink.".
    pub fn ask_text(&mut self, context: &str, question: &str) -> Result<&Analysis> {
        let req = AnalyzeRequest {
            question: question.to_owned(),
            context: Some(context.to_owned()),
            image: None,
            options: Self::options(None),
        };
        let analysis = analyze(&self.handle, None, &self.templates, &req)?;
        Ok(self.last.insert(analysis))
    }

    fn analysis(&self) -> Result<&Analysis> {
        self.last
            .as_ref()
            .ok_or_else(|| Error::input("run an analysis first"))
    }

    /// Tokens nearest to the residual stream entering `layer` at a patch cell.
    pub fn probe_cell(&self, row: usize, col: usize, layer: usize, top_k: usize) -> Result<String> {
        let probe = ProbeRequest::Project {
            at: PositionRef::Cell([row, col]),
            vector: VectorSource::LayerInput { layer },
            space: Space::Embedding,
            top_k,
        };
        Ok(serde_json::to_string(&self.analysis()?.probe(&probe)?)?)
    }

    /// Blended heatmap of the last visual analysis, as PNG.
    pub fn heatmap(&self, method: MapMethod) -> Result<Vec<u8>> {
        self.analysis()?
            .heatmap(method, false)?
            .ok_or_else(|| Error::input("the last analysis has no image"))?
            .blended_png()
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// JavaScript handle on a [`Demo`].
#[wasm_bindgen]
pub struct Explorer(Demo);

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new() -> std::result::Result<Explorer, JsError> {
        Demo::new().map(Explorer).map_err(js)
    }

    /// Returns the scene as JSON; fetch its pixels with `scene_png`.
    pub fn draw_scene(
        &mut self,
        seed: u64,
        objects: usize,
    ) -> std::result::Result<String, JsError> {
        let view = self.0.draw_scene(seed, objects).map_err(js)?;
        serde_json::to_string(view).map_err(|e| js(e.into()))
    }

    pub fn scene_png(&self) -> Vec<u8> {
        self.0
            .scene
            .as_ref()
            .map(|s| s.png.clone())
            .unwrap_or_default()
    }

    /// Analysis response as JSON. An empty `target` attributes the prediction.
    pub fn ask_image(
        &mut self,
        question: &str,
        target: &str,
    ) -> std::result::Result<String, JsError> {
        let target = (!target.trim().is_empty()).then(|| target.trim().to_owned());
        let a = self.0.ask_image(question, target).map_err(js)?;
        serde_json::to_string(&a.response).map_err(|e| js(e.into()))
    }

    pub fn ask_text(
        &mut self,
        context: &str,
        question: &str,
    ) -> std::result::Result<String, JsError> {
        let a = self.0.ask_text(context, question).map_err(js)?;
        serde_json::to_string(&a.response).map_err(|e| js(e.into()))
    }

    pub fn probe_cell(
        &self,
        row: usize,
        col: usize,
        layer: usize,
        top_k: usize,
    ) -> std::result::Result<String, JsError> {
        self.0.probe_cell(row, col, layer, top_k).map_err(js)
    }

    /// `method` is `logprob` or `avg-attention`.
    pub fn heatmap_png(&self, method: &str) -> std::result::Result<Vec<u8>, JsError> {
        let method = match method {
            "logprob" => MapMethod::Logprob,
            "avg-attention" => MapMethod::AvgAttention,
            other => return Err(JsError::new(&format!("unknown map `{other}`"))),
        };
        self.0.heatmap(method).map_err(js)
    }

    pub fn layers(&self) -> usize {
        self.0.handle.model().config().n_layers
    }
}
