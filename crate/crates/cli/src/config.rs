use std::path::Path;

use paxnet::capsnet::{AeTrainConfig, ModelConfig};
use paxnet::pipeline::ExtractConfig;
use paxnet::training::synth::PanoramicConfig;
use paxnet::training::{LrRangeConfig, SynthConfig, TrainConfig};
use paxnet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. `seed` is the master seed: the
/// per-stage seeds below are derived from it when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub panoramic: PanoramicConfig,
    pub extract: ExtractConfig,
    pub model: ModelConfig,
    pub autoencoder: AeTrainConfig,
    pub train: TrainConfig,
    pub lr_range: LrRangeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            synth: SynthConfig::default(),
            panoramic: PanoramicConfig::default(),
            extract: ExtractConfig::default(),
            model: ModelConfig::mini(),
            autoencoder: AeTrainConfig::default(),
            train: TrainConfig::default(),
            lr_range: LrRangeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the master seed to every stage and checks the sections.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.extract = self.extract.with_seed(self.seed);
        self.autoencoder.seed = self.seed;
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.lr_range.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(self)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
