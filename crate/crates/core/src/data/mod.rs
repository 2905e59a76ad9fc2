//! Session log ingestion, vocabulary, filtering, augmentation, temporal
//! splitting and padded batching.

mod batch;
mod cache;
mod filter;
mod load;
mod split;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{batch_iter, Batch, Batches};
pub use cache::{load_cache, prepare, save_cache, DatasetSummary, PrepOptions, PreparedDataset, Provenance, CACHE_FORMAT_VERSION};
pub use filter::{filter_and_index, filter_raw, FilterThresholds};
pub use load::{load_events, parse_events, InputFormat};
pub use split::{sessionize, temporal_split, temporal_split_streams, SplitRule, SECONDS_PER_DAY};
pub use vocab::{Vocabulary, VocabularyDigest};

/// Dense item index. `0` is reserved for padding.
pub type ItemIndex = u32;

pub const PADDING: ItemIndex = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no events")]
    EmptyInput,
    #[error("no sessions survive filtering")]
    EmptyAfterFilter,
    #[error("invalid split rule: {0}")]
    InvalidRule(String),
    #[error("split produced an empty {side} set")]
    DegenerateSplit { side: &'static str },
    #[error("invalid dataset cache: {0}")]
    Cache(String),
}

/// Ungrouped-to-grouped event stream keyed by an external session (or user) id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSession {
    pub id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl RawSession {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn end_time(&self) -> i64 {
        self.timestamps.last().copied().unwrap_or(i64::MIN)
    }
}

/// Indexed session: ordered item indices plus the time of its last event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub items: Vec<ItemIndex>,
    pub last_timestamp: i64,
}

/// Prefix-to-next-item supervision pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prefix: Vec<ItemIndex>,
    pub target: ItemIndex,
    /// End time of the source session; orders examples temporally.
    pub timestamp: i64,
}

/// Anything with a session end time, for temporal splitting.
pub trait Timed {
    fn end_time(&self) -> i64;
    fn key(&self) -> &str;
}

impl Timed for RawSession {
    fn end_time(&self) -> i64 {
        RawSession::end_time(self)
    }
    fn key(&self) -> &str {
        &self.id
    }
}

impl Timed for Session {
    fn end_time(&self) -> i64 {
        self.last_timestamp
    }
    fn key(&self) -> &str {
        &self.id
    }
}

/// Prefix expansion: `[v1..vn]` yields `([v1..vk], v(k+1))` for `k = 1..n-1`.
pub fn augment(sessions: &[Session]) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for s in sessions {
        for k in 1..s.items.len() {
            out.push(TrainingExample {
                prefix: s.items[..k].to_vec(),
                target: s.items[k],
                timestamp: s.last_timestamp,
            });
        }
    }
    out
}

/// Train/validation/test examples over one vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<TrainingExample>,
    pub validation: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl SessionDataset {
    /// Splits `train` so that the temporally last `fraction` becomes validation.
    /// Examples must already be in temporal order.
    pub fn with_validation(
        vocabulary: Vocabulary,
        mut train: Vec<TrainingExample>,
        test: Vec<TrainingExample>,
        fraction: f64,
    ) -> Self {
        let n_val = ((train.len() as f64) * fraction).round() as usize;
        let validation = train.split_off(train.len() - n_val.min(train.len()));
        Self { vocabulary, train, validation, test }
    }

    pub fn num_items(&self) -> usize {
        self.vocabulary.len()
    }
}
