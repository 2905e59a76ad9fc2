//! TOML run configuration. Every key is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! [data]
//! input = "clicks.csv"        # raw events
//! format = "csv"              # or "tsv"
//! validation_fraction = 0.2
//! [data.thresholds]
//! min_session_len = 2
//! min_item_freq = 5
//! top_k_items = 0             # 0 keeps every item
//! [data.split]
//! rule = "last_week"          # or "last_fraction" / "interval_last_fraction"
//!
//! [model]
//! dim = 256
//! levels = 3
//! heads = 4
//! sigma = 12.0
//! p = 4.0
//! variant = "full"            # M, IP, LI, LP
//!
//! [train]
//! lr = 0.001
//! batch_size = 100
//! max_epochs = 30
//! patience = 3
//! seed = 0
//! weight_decay = 0.0
//!
//! [eval]
//! cutoffs = [5, 10, 20]
//! buckets = ["1-3", "4-6", "7+"]
//!
//! [probe]
//! targets = ["merge"]
//! lambda = 1.0
//! threshold = 0.01
//! epochs = 10
//!
//! [sweep]
//! levels = [1, 2, 3, 4, 5]
//! heads = [1, 2, 4]
//! lrs = []                    # empty: use train.lr
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FilterThresholds, InputFormat, PrepOptions, SplitRule};
use crate::eval::{LengthBucket, DEFAULT_CUTOFFS};
use crate::model::HyperParams;
use crate::sparsity::ProbeConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: HyperParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
    pub format: InputFormat,
    pub thresholds: FilterThresholds,
    pub split: SplitRule,
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PrepOptions::default();
        Self {
            input: None,
            format: p.format,
            thresholds: p.thresholds,
            split: p.split,
            validation_fraction: p.validation_fraction,
        }
    }
}

impl DataConfig {
    pub fn prep_options(&self) -> PrepOptions {
        PrepOptions {
            format: self.format,
            thresholds: self.thresholds,
            split: self.split,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub buckets: Vec<LengthBucket>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cutoffs: DEFAULT_CUTOFFS.to_vec(), buckets: LengthBucket::default_set() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub levels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Learning rates to try; empty means `train.lr` only.
    pub lrs: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { levels: vec![1, 2, 3, 4, 5], heads: vec![1, 2, 4], lrs: Vec::new() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Applies a command-line seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.probe.seed = s;
        }
        self
    }

    /// The resolved configuration as JSON, for embedding in artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
