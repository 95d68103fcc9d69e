//! Run configuration: file values with full defaulting, overridden by flags.
//! The merged result is snapshotted next to every command's outputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use scenflow::agents::scenario::Kind;
use scenflow::denoiser::NetConfig;
use scenflow::flow::TrainConfig;
use scenflow::metrics::MetricConfig;

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Tool version that wrote a snapshot; ignored on load.
    pub version: String,
    pub global: GlobalConfig,
    pub synth_data: SynthDataConfig,
    pub annotate: AnnotateConfig,
    pub train: TrainCommandConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub judge: JudgeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            global: GlobalConfig::default(),
            synth_data: SynthDataConfig::default(),
            annotate: AnnotateConfig::default(),
            train: TrainCommandConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            judge: JudgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            log_level: "info".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDataConfig {
    pub kind: Kind,
    pub n: usize,
    pub len: usize,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            kind: Kind::Pv,
            n: 100,
            len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateConfig {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCommandConfig {
    pub dataset: Option<PathBuf>,
    /// Imported embeddings keyed by scenario id; the reference encoder is
    /// used when absent.
    pub embeddings: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Network shape; the desk-scale default sized to the data when absent.
    pub net: Option<NetConfig>,
    /// Its `seed` field is replaced by `global.seed`.
    pub params: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub checkpoint: Option<PathBuf>,
    /// Dataset file whose records provide prompt ids and prompts.
    pub prompts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub samples_per_prompt: usize,
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            prompts: None,
            embeddings: None,
            samples_per_prompt: 1,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub real: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub metrics: MetricConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub embeddings: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Label columns to probe; every column but `id` when empty.
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub generated: Option<PathBuf>,
    /// Prompt dataset for generated records; scenario records are judged
    /// against their own metadata.
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.version = env!("CARGO_PKG_VERSION").to_string();
        Ok(cfg)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_NAME);
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// The value of a required path option, or a validation error naming it.
pub fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("missing required option `{name}`"))
}
