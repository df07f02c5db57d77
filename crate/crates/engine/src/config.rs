//! The single versioned run configuration consumed by every command, plus
//! the resolved-snapshot format that makes each command reproducible from
//! one file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioConfig;
use crate::blendshape::ChannelLayout;
use crate::data::OracleSpec;
use crate::denoiser::DiffusionTrainConfig;
use crate::error::{EngineError, Result};
use crate::lip::LipTrainConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserNetConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Feed-forward width; defaults to `4 * width`.
    pub ff_width: Option<usize>,
}

impl Default for DenoiserNetConfig {
    fn default() -> Self {
        DenoiserNetConfig {
            layers: 4,
            heads: 4,
            width: 128,
            ff_width: None,
        }
    }
}

impl DenoiserNetConfig {
    pub fn ff_width(&self) -> usize {
        self.ff_width.unwrap_or(4 * self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipNetConfig {
    pub lstm_hidden: usize,
    pub emo_width: usize,
}

impl Default for LipNetConfig {
    fn default() -> Self {
        LipNetConfig {
            lstm_hidden: 64,
            emo_width: 32,
        }
    }
}

/// Everything a run needs, in one schema-validated JSON document.
/// Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Layout JSON; None selects the builtin ARKit layout.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    /// Clip manifest for training, style lookup, and evaluation.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub denoiser: DenoiserNetConfig,
    #[serde(default)]
    pub diffusion_train: DiffusionTrainConfig,
    #[serde(default)]
    pub lip: LipNetConfig,
    #[serde(default)]
    pub lip_train: LipTrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub audio: AudioConfig,
    #[serde(default)]
    pub oracle: OracleSpec,
}

impl RunConfig {
    /// Minimal config writing under `output_dir` with the given seed.
    pub fn new(output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed,
            output_dir: output_dir.into(),
            layout: None,
            dataset: None,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserNetConfig::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            lip: LipNetConfig::default(),
            lip_train: LipTrainConfig::default(),
            sampler: SamplerConfig::default(),
            audio: AudioConfig::default(),
            oracle: OracleSpec::default(),
        }
    }

    /// Parse and fully validate a config file; relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            EngineError::Config(format!("{}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Make all contained paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.output_dir);
        if let Some(p) = self.layout.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.dataset.as_mut() {
            resolve(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(EngineError::Config(format!(
                "config version {} unsupported; expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(EngineError::Config("output_dir must be set".into()));
        }
        // Building the schedule enforces its invariants, including the
        // terminal-noise bound.
        self.schedule.build()?;
        if self.denoiser.layers == 0
            || self.denoiser.heads == 0
            || self.denoiser.width == 0
            || self.denoiser.width % self.denoiser.heads != 0
        {
            return Err(EngineError::Config(
                "denoiser: layers/heads/width must be positive and width divisible by heads".into(),
            ));
        }
        self.diffusion_train.validate()?;
        self.lip_train.validate()?;
        self.sampler.validate()?;
        self.audio.validate()?;
        self.oracle.validate()?;
        Ok(())
    }

    /// The channel layout this run operates on. The dataset manifest's
    /// layout takes priority (its files were written with it), then the
    /// config's layout file, then the builtin ARKit layout.
    pub fn resolve_layout(&self) -> Result<ChannelLayout> {
        if let Some(manifest_path) = &self.dataset {
            if manifest_path.exists() {
                let manifest = crate::data::ClipManifest::load(manifest_path)?;
                let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
                return ChannelLayout::from_json_file(&base.join(&manifest.layout));
            }
        }
        match &self.layout {
            Some(p) => ChannelLayout::from_json_file(p),
            None => Ok(ChannelLayout::arkit()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| EngineError::io(path.display().to_string(), e))
    }
}

/// Resolved command snapshot: the exact config and arguments a command ran
/// with. Re-running the snapshot reproduces the outputs bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub command: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Snapshot {
    pub fn new(command: &str, args: BTreeMap<String, String>, config: RunConfig) -> Self {
        Snapshot {
            command: command.to_string(),
            args,
            config,
        }
    }

    /// Write `resolved_<command>.json` under the config's output dir.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self
            .config
            .output_dir
            .join(format!("resolved_{}.json", self.command.replace('-', "_")));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Config(format!("snapshot serialize: {e}")))?;
        std::fs::write(&path, text).map_err(|e| EngineError::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        let snap: Snapshot = serde_json::from_str(&text)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        snap.config.validate()?;
        Ok(snap)
    }
}
