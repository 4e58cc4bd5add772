//! Run configuration files.
//!
//! A config file mirrors [`SamplerConfig`] (and the nested schedule, guidance
//! and backend sections); every field is optional. Files ending in `.json`
//! are read as JSON, anything else as YAML.
//!
//! ```yaml
//! schedule:
//!   inference_steps: 8
//! seed: 3
//! guidance:
//!   k_contrast: 0.5
//! backend:
//!   id: toy
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;

pub fn load_config(path: impl AsRef<Path>) -> Result<SamplerConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        parse_json(&text)?
    } else {
        parse_yaml(&text)?
    };
    Ok(cfg)
}

pub fn parse_yaml(text: &str) -> Result<SamplerConfig> {
    if text.trim().is_empty() {
        return Ok(SamplerConfig::default());
    }
    let cfg: SamplerConfig = serde_yaml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_json(text: &str) -> Result<SamplerConfig> {
    let cfg: SamplerConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}
