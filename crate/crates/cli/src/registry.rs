// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loaded models by id.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use patchlens_core::mm::{ShapeColorEncoder, VisionEncoder, BACKGROUND_TOKEN};
use patchlens_core::model::RunQueue;
use patchlens_core::toy::{builtin_color_model, ColorWorld, TOY_COLOR_ID, TOY_COLOR_REFERENCE_ID};
use patchlens_core::{Error, Model, ModelHandle, Result};

use crate::config::ModelSource;

pub struct LoadedModel {
    pub handle: ModelHandle,
    pub encoder: Option<Arc<dyn VisionEncoder>>,
}

impl LoadedModel {
    pub fn new(model: Model, max_pending: usize) -> Result<Self> {
        let encoder: Option<Arc<dyn VisionEncoder>> =
            if model.config().vision.is_some() && model.vocab().id(BACKGROUND_TOKEN).is_some() {
                Some(Arc::new(ShapeColorEncoder::for_model(&model)?))
            } else {
                None
            };
        Ok(Self {
            handle: ModelHandle::with_queue(model, RunQueue::new(max_pending)),
            encoder,
        })
    }

    pub fn encoder(&self) -> Option<&dyn VisionEncoder> {
        self.encoder.as_deref()
    }
}

/// Ids that need no file.
pub const BUILTIN_MODELS: [&str; 2] = [TOY_COLOR_ID, TOY_COLOR_REFERENCE_ID];

fn builtin(id: &str) -> Option<Result<Model>> {
    match id {
        TOY_COLOR_ID => Some(builtin_color_model()),
        TOY_COLOR_REFERENCE_ID => Some(ColorWorld::default().reference_geometry_model(0)),
        _ => None,
    }
}

/// Loads a built-in id or a model archive path.
pub fn load_model(spec: &str) -> Result<Model> {
    if let Some(m) = builtin(spec) {
        return m;
    }
    let path = Path::new(spec);
    if path.is_file() {
        return Model::load(path);
    }
    Err(Error::Capability(format!(
        "unknown model `{spec}`: not a built-in ({}) and not a file",
        BUILTIN_MODELS.join(", ")
    )))
}

/// Lazily loaded models, shared across requests.
pub struct Registry {
    sources: BTreeMap<String, ModelSource>,
    loaded: Mutex<BTreeMap<String, Arc<LoadedModel>>>,
    max_pending: usize,
}

impl Registry {
    pub fn new(sources: &[ModelSource], max_pending: usize) -> Self {
        Self {
            sources: sources.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            loaded: Mutex::new(BTreeMap::new()),
            max_pending,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = BUILTIN_MODELS.iter().map(|s| s.to_string()).collect();
        ids.extend(self.sources.keys().cloned());
        ids.sort();
        ids.dedup();
        ids
    }

    /// `Ok(None)` for an unknown id.
    pub fn get(&self, id: &str) -> Result<Option<Arc<LoadedModel>>> {
        let mut loaded = self.loaded.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(m) = loaded.get(id) {
            return Ok(Some(m.clone()));
        }
        let model = match (self.sources.get(id), builtin(id)) {
            (Some(src), _) => Model::load(&src.path)?,
            (None, Some(m)) => m?,
            (None, None) => return Ok(None),
        };
        let entry = Arc::new(LoadedModel::new(model, self.max_pending)?);
        loaded.insert(id.to_owned(), entry.clone());
        Ok(Some(entry))
    }

    /// Registers an already loaded model under `id`.
    pub fn insert(&self, id: &str, model: LoadedModel) -> Arc<LoadedModel> {
        let entry = Arc::new(model);
        self.loaded
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.to_owned(), entry.clone());
        entry
    }
}
