// SPDX-License-Identifier: MIT OR Apache-2.0

//! Service configuration: a TOML file, then `PATCHLENS_*` environment
//! overrides.

use std::path::{Path, PathBuf};

use patchlens_core::trace::CapturePrecision;
use patchlens_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Model used when a request names none.
    pub default_model: String,
    /// Extra models loaded from archives, by id.
    pub models: Vec<ModelSource>,
    /// Only `cpu` is supported.
    pub device: String,
    pub cache_capacity: usize,
    pub session_ttl_secs: u64,
    pub max_pending: usize,
    pub deterministic: bool,
    pub capture_precision: CapturePrecision,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    pub id: String,
    pub path: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            default_model: patchlens_core::toy::TOY_COLOR_ID.into(),
            models: Vec::new(),
            device: "cpu".into(),
            cache_capacity: 8,
            session_ttl_secs: 600,
            max_pending: 64,
            deterministic: false,
            capture_precision: CapturePrecision::F32,
            templates: None,
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::input(format!("{key}: cannot parse `{raw}`")))
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies overrides from `vars` (normally `std::env::vars()`).
    pub fn apply_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        for (key, value) in vars {
            match key.as_str() {
                "PATCHLENS_BIND" => self.bind = value,
                "PATCHLENS_MODEL" => {
                    let path = PathBuf::from(&value);
                    let id = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .ok_or_else(|| {
                            Error::input(format!("PATCHLENS_MODEL: bad path `{value}`"))
                        })?
                        .to_owned();
                    self.models.retain(|m| m.id != id);
                    self.models.push(ModelSource {
                        id: id.clone(),
                        path,
                    });
                    self.default_model = id;
                }
                "PATCHLENS_DEFAULT_MODEL" => self.default_model = value,
                "PATCHLENS_DEVICE" => self.device = value,
                "PATCHLENS_CACHE_CAPACITY" => self.cache_capacity = parse_env(&key, &value)?,
                "PATCHLENS_SESSION_TTL" => self.session_ttl_secs = parse_env(&key, &value)?,
                "PATCHLENS_MAX_PENDING" => self.max_pending = parse_env(&key, &value)?,
                "PATCHLENS_DETERMINISTIC" => self.deterministic = parse_env(&key, &value)?,
                "PATCHLENS_CAPTURE_PRECISION" => self.capture_precision = value.parse()?,
                "PATCHLENS_TEMPLATES" => self.templates = Some(value.into()),
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Capability(format!(
                "device `{}` is not available; use `cpu`",
                self.device
            )));
        }
        if self.cache_capacity == 0 {
            return Err(Error::input("cache_capacity must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let cfg = ServiceConfig::from_toml("bind = \"0.0.0.0:1\"\ncache_capacity = 3\n").unwrap();
        assert_eq!(cfg.cache_capacity, 3);
        let cfg = cfg
            .apply_env([
                ("PATCHLENS_CACHE_CAPACITY".to_string(), "5".to_string()),
                ("PATCHLENS_MODEL".to_string(), "/m/small.plm".to_string()),
                ("HOME".to_string(), "/root".to_string()),
            ])
            .unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:1");
        assert_eq!(cfg.cache_capacity, 5);
        assert_eq!(cfg.default_model, "small");
        assert_eq!(cfg.models[0].path, PathBuf::from("/m/small.plm"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig::from_toml("cache_size = 3").is_err());
        let bad =
            |k: &str, v: &str| ServiceConfig::default().apply_env([(k.to_string(), v.to_string())]);
        assert!(bad("PATCHLENS_SESSION_TTL", "soon").is_err());
        assert!(bad("PATCHLENS_DEVICE", "cuda").is_err());
        assert!(bad("PATCHLENS_CACHE_CAPACITY", "0").is_err());
    }
}
