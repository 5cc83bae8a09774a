//! Bundled model and GPU specifications, stored as config documents.

use crate::config::{parse_gpu_section, parse_model_section, Document};
use crate::error::{Error, Result};
use crate::types::{GpuSpec, ModelSpec};

pub const MODEL_NAMES: &[&str] = &["llama-13b", "llama-33b", "gpt3"];
pub const GPU_NAMES: &[&str] = &["a6000", "a100"];

fn model_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "llama-13b" => include_str!("../data/presets/llama-13b.cfg"),
        "llama-33b" => include_str!("../data/presets/llama-33b.cfg"),
        "gpt3" => include_str!("../data/presets/gpt3.cfg"),
        _ => return None,
    })
}

fn gpu_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "a6000" => include_str!("../data/presets/a6000.cfg"),
        "a100" => include_str!("../data/presets/a100.cfg"),
        _ => return None,
    })
}

pub fn model(name: &str) -> Result<ModelSpec> {
    let src = model_source(name).ok_or_else(|| Error::InvalidModel {
        name: name.to_string(),
        reason: format!("unknown preset (known: {})", MODEL_NAMES.join(", ")),
    })?;
    let doc = Document::parse(src, &format!("preset:{name}"))?;
    let section = doc.section("model").ok_or_else(|| Error::InvalidModel {
        name: name.to_string(),
        reason: "preset has no [model] section".into(),
    })?;
    parse_model_section(section, None, &format!("preset:{name}"))
}

pub fn gpu(name: &str) -> Result<GpuSpec> {
    let src = gpu_source(name).ok_or_else(|| Error::InvalidGpu {
        name: name.to_string(),
        reason: format!("unknown preset (known: {})", GPU_NAMES.join(", ")),
    })?;
    let doc = Document::parse(src, &format!("preset:{name}"))?;
    let section = doc.section("gpu").ok_or_else(|| Error::InvalidGpu {
        name: name.to_string(),
        reason: "preset has no [gpu] section".into(),
    })?;
    parse_gpu_section(section, None, &format!("preset:{name}"))
}
