//! Versioned run configuration.

use std::path::Path;

use anyhow::{bail, Context};
use lidargen::denoiser::DenoiserConfig;
use lidargen::diffusion::SamplerConfig;
use lidargen::metrics::{EvalConfig, ExtractorTrainConfig};
use lidargen::synthgen::SynthConfig;
use lidargen::train::TrainConfig;
use lidargen::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

const DESK: &str = include_str!("../presets/desk.json");
const XS: &str = include_str!("../presets/xs.json");

/// One file can describe a whole pipeline; each subcommand reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<DenoiserConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Write an intermediate checkpoint every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

/// A parsed configuration plus the exact text it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
    pub raw: serde_json::Value,
}

fn parse(text: &str, source: String) -> anyhow::Result<LoadedConfig> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
    let config: RunConfig =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Config(format!("{source}: {e}")))?;
    if config.version != CONFIG_VERSION {
        return Err(Error::Config(format!("{source}: config version {} is not {CONFIG_VERSION}", config.version)).into());
    }
    Ok(LoadedConfig { config, source, raw })
}

pub fn preset(name: &str) -> anyhow::Result<LoadedConfig> {
    let text = match name {
        "desk" => DESK,
        "xs" => XS,
        other => bail!(Error::Config(format!("unknown preset {other:?} (expected desk or xs)"))),
    };
    parse(text, format!("preset:{name}"))
}

pub fn load(path: Option<&Path>, preset_name: &str) -> anyhow::Result<LoadedConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text, p.display().to_string())
        }
        None => preset(preset_name),
    }
}

pub fn section<T: Clone>(value: &Option<T>, name: &str, source: &str) -> anyhow::Result<T> {
    value.clone().ok_or_else(|| Error::Config(format!("{source} has no {name:?} section")).into())
}
