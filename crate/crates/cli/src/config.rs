//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectral_forecaster::data::{ChannelRef, SplitSpec, SyntheticSpec};
use spectral_forecaster::model::ModelConfig;
use spectral_forecaster::training::TrainConfig;

/// Failure to read or make sense of a configuration file or flag.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Where the series comes from. Exactly one of the fields must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV with a timestamp column followed by numeric channels.
    pub path: Option<PathBuf>,
    /// Inline synthetic signal.
    pub synthetic: Option<SyntheticSpec>,
    /// JSON file holding a synthetic signal spec.
    pub synthetic_spec: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: String,
    pub out_dir: PathBuf,
    /// Drives parameter initialization, batch order and dropout.
    pub seed: u64,
    /// Horizons to train and evaluate; empty means `model.horizon`.
    pub horizons: Vec<usize>,
    pub exclude_channels: Vec<ChannelRef>,
    pub dataset: DatasetConfig,
    /// Defaults to the ETT protocol for files named `ETT*`, otherwise 70/10/20.
    pub split: Option<SplitSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tag: "synthetic".into(),
            out_dir: PathBuf::from("runs/synthetic"),
            seed: 0,
            horizons: Vec::new(),
            exclude_channels: Vec::new(),
            dataset: DatasetConfig {
                synthetic: Some(SyntheticSpec::default()),
                ..DatasetConfig::default()
            },
            split: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|ConfigError(m)| ConfigError(format!("{}: {m}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.dataset.synthetic_spec.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The tiny smoke-test preset on the default synthetic signal.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.apply_tiny();
        cfg
    }

    /// Swaps in the tiny model and a short training budget.
    pub fn apply_tiny(&mut self) {
        self.model = ModelConfig {
            channels: self.model.channels,
            ..ModelConfig::tiny()
        };
        self.horizons.clear();
        self.train.max_epochs = self.train.max_epochs.min(10);
    }

    pub fn horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn split_for_dataset(&self) -> SplitSpec {
        if let Some(s) = &self.split {
            return s.clone();
        }
        let ett = self
            .dataset
            .path
            .as_ref()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("ETT"));
        if ett {
            SplitSpec::ett()
        } else {
            SplitSpec::standard()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        let sources = [
            d.path.is_some(),
            d.synthetic.is_some(),
            d.synthetic_spec.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(ConfigError(
                "dataset needs exactly one of `path`, `synthetic`, `synthetic_spec`".into(),
            ));
        }
        if self.horizons.contains(&0) {
            return Err(ConfigError("horizons must be positive".into()));
        }
        Ok(())
    }
}

/// Parses a comma-separated list such as `96,192`.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, ConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| ConfigError(format!("cannot parse list item `{s}`")))
        })
        .collect()
}
