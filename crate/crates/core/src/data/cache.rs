use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filter::index_sessions;
use super::split::sessionize;
use super::{
    augment, filter_raw, temporal_split, DataError, FilterThresholds, InputFormat, RawSession,
    SessionDataset, SplitRule, Vocabulary,
};

pub const CACHE_FORMAT_VERSION: u32 = 1;

/// Preprocessing knobs for [`prepare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepOptions {
    pub format: InputFormat,
    pub thresholds: FilterThresholds,
    pub split: SplitRule,
    pub validation_fraction: f64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            format: InputFormat::Csv,
            thresholds: FilterThresholds::default(),
            split: SplitRule::LastWeek,
            validation_fraction: 0.2,
        }
    }
}

/// Corpus statistics after preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Events in retained train + test sessions.
    pub clicks: usize,
    /// Retained sessions (train + test), before augmentation.
    pub sessions: usize,
    /// Augmented examples (train + validation + test).
    pub examples: usize,
    pub items: usize,
    /// Mean retained session length.
    pub average_length: f64,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub test_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub options: PrepOptions,
    /// Test events removed because their item never occurs in train.
    pub dropped_test_events: usize,
    /// Test sessions removed after unseen-item removal left them too short.
    pub dropped_test_sessions: usize,
    pub summary: DatasetSummary,
    /// Effective configuration of the producing run, if any.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// On-disk prepared dataset: version, splits, vocabulary, provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub format_version: u32,
    pub dataset: SessionDataset,
    pub provenance: Provenance,
}

/// Filter, split, index and augment grouped raw events.
pub fn prepare(
    raw: &[RawSession],
    source: &str,
    opts: &PrepOptions,
) -> Result<PreparedDataset, DataError> {
    let (sessions, rule) = match opts.split {
        SplitRule::IntervalLastFraction { gap_seconds, fraction } => {
            if gap_seconds <= 0 {
                return Err(DataError::InvalidRule(format!("{:?}", opts.split)));
            }
            (sessionize(raw, gap_seconds), SplitRule::LastFraction { fraction })
        }
        other => (raw.to_vec(), other),
    };
    if !(0.0..1.0).contains(&opts.validation_fraction) {
        return Err(DataError::InvalidRule(format!(
            "validation fraction {}",
            opts.validation_fraction
        )));
    }
    let filtered = filter_raw(&sessions, opts.thresholds)?;
    let (train_raw, test_raw) = temporal_split(&filtered, rule)?;

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in &train_raw {
        for it in &s.items {
            *counts.entry(it.as_str()).or_insert(0) += 1;
        }
    }
    let vocab = Vocabulary::from_counts(counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect());

    let train = index_sessions(&train_raw, &vocab);
    let min_len = opts.thresholds.min_session_len.max(2);
    let indexed_test = index_sessions(&test_raw, &vocab);
    let dropped_test_events = test_raw
        .iter()
        .zip(&indexed_test)
        .map(|(r, s)| r.items.len() - s.items.len())
        .sum();
    let before = indexed_test.len();
    let test: Vec<_> = indexed_test.into_iter().filter(|s| s.items.len() >= min_len).collect();
    let dropped_test_sessions = before - test.len();
    if test.is_empty() {
        return Err(DataError::DegenerateSplit { side: "test" });
    }

    let train_examples = augment(&train);
    let test_examples = augment(&test);
    let dataset =
        SessionDataset::with_validation(vocab, train_examples, test_examples, opts.validation_fraction);

    let clicks: usize = train.iter().chain(&test).map(|s| s.items.len()).sum();
    let n_sessions = train.len() + test.len();
    let summary = DatasetSummary {
        clicks,
        sessions: n_sessions,
        examples: dataset.train.len() + dataset.validation.len() + dataset.test.len(),
        items: dataset.vocabulary.len(),
        average_length: clicks as f64 / n_sessions as f64,
        train_examples: dataset.train.len(),
        validation_examples: dataset.validation.len(),
        test_examples: dataset.test.len(),
    };
    Ok(PreparedDataset {
        format_version: CACHE_FORMAT_VERSION,
        dataset,
        provenance: Provenance {
            source: source.to_string(),
            options: opts.clone(),
            dropped_test_events,
            dropped_test_sessions,
            summary,
            config: serde_json::Value::Null,
        },
    })
}

pub fn save_cache(path: &Path, data: &PreparedDataset) -> Result<(), DataError> {
    let bytes = serde_json::to_vec(data).map_err(|e| DataError::Cache(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_cache(path: &Path) -> Result<PreparedDataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let data: PreparedDataset =
        serde_json::from_slice(&bytes).map_err(|e| DataError::Cache(e.to_string()))?;
    if data.format_version != CACHE_FORMAT_VERSION {
        return Err(DataError::Cache(format!(
            "format version {} (expected {CACHE_FORMAT_VERSION})",
            data.format_version
        )));
    }
    let v = data.dataset.vocabulary.len() as u32;
    let all = data.dataset.train.iter().chain(&data.dataset.validation).chain(&data.dataset.test);
    for e in all {
        if e.prefix.is_empty() || e.target == 0 || e.target > v || e.prefix.iter().any(|&i| i == 0 || i > v) {
            return Err(DataError::Cache("example references an invalid item index".into()));
        }
    }
    Ok(data)
}
