//! Resolved run configuration: config-file values overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use desmoke::model::ModelConfig;
use desmoke::parallel::Execution;
use desmoke::synth::SmokeParams;
use desmoke::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of generated textures used as clean sources.
    pub textures: Option<usize>,
    /// Directory of clean frames, used instead of generated textures.
    pub source: Option<PathBuf>,
    /// Maximum number of frames taken from `source`.
    pub count: Option<usize>,
    pub seed: u64,
    pub size: usize,
    pub test_fraction: f64,
    pub smoke: SmokeParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            textures: None,
            source: None,
            count: None,
            seed: 0,
            size: 64,
            test_fraction: 0.25,
            smoke: SmokeParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub ckpt: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub method: Option<String>,
    pub ckpt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub exec: Execution,
    pub synth: SynthConfig,
    /// Network shape; the image size is taken from the dataset when training.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            data: None,
            out: None,
            exec: Execution::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serialisable")
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}
