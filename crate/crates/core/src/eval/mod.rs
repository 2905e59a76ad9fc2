//! Ranking metrics, length-bucketed breakdowns and timing.

mod report;

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, ItemIndex, TrainingExample};
use crate::model::{forward_batch, Distribution, HyperParams, ModelError, ModelParams};

pub use report::{render_bucket_table, render_report};

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("target {target} outside 1..={num_items}")]
    InvalidTarget { target: ItemIndex, num_items: usize },
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("cutoff must be >= 1")]
    InvalidCutoff,
    #[error("invalid length bucket `{0}`")]
    InvalidBucket(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of `target` among `scores` (entry `i` is item `i + 1`),
/// descending, ties going to the smaller index.
pub fn rank_in_scores(scores: &[f64], target: ItemIndex) -> Result<usize, EvalError> {
    let t = target as usize;
    if t == 0 || t > scores.len() {
        return Err(EvalError::InvalidTarget { target, num_items: scores.len() });
    }
    let ts = scores[t - 1];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && i < t - 1) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn rank_of_target(dist: &Distribution, target: ItemIndex) -> Result<usize, EvalError> {
    rank_in_scores(&dist.probs, target)
}

/// `(HR@K, MRR@K)` over a set of ranks.
pub fn hr_mrr(ranks: &[usize], k: usize) -> Result<(f64, f64), EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidCutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    let mut hits = 0usize;
    let mut rr = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1;
            rr += 1.0 / r as f64;
        }
    }
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, rr / n))
}

/// Inclusive prefix-length range; `max == None` is open-ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthBucket {
    pub min: usize,
    pub max: Option<usize>,
}

impl LengthBucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.min && self.max.map_or(true, |m| len <= m)
    }

    pub fn default_set() -> Vec<LengthBucket> {
        vec![
            LengthBucket { min: 1, max: Some(3) },
            LengthBucket { min: 4, max: Some(6) },
            LengthBucket { min: 7, max: None },
        ]
    }
}

impl std::fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.max {
            Some(m) => write!(f, "{}-{}", self.min, m),
            None => write!(f, "{}+", self.min),
        }
    }
}

impl std::str::FromStr for LengthBucket {
    type Err = EvalError;

    /// `"a-b"` or `"a+"`.
    fn from_str(s: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::InvalidBucket(s.to_string());
        let s = s.trim();
        let b = if let Some(lo) = s.strip_suffix('+') {
            LengthBucket { min: lo.parse().map_err(|_| bad())?, max: None }
        } else {
            let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
            LengthBucket { min: lo.parse().map_err(|_| bad())?, max: Some(hi.parse().map_err(|_| bad())?) }
        };
        if b.min == 0 || b.max.is_some_and(|m| m < b.min) {
            return Err(bad());
        }
        Ok(b)
    }
}

impl Serialize for LengthBucket {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LengthBucket {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: LengthBucket,
    pub examples: usize,
    /// Empty when the bucket holds no examples.
    pub metrics: Vec<CutoffMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub overall: Vec<CutoffMetrics>,
    pub buckets: Vec<BucketMetrics>,
    /// Wall time of this evaluation.
    pub eval_seconds: f64,
    /// Mean training epoch time of the evaluated model, when known.
    pub train_epoch_seconds: Option<f64>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.overall.iter().find(|m| m.k == k)
    }
}

/// Anything that scores every item for a batch of prefixes.
pub trait Scorer {
    fn num_items(&self) -> usize;
    /// One score row per example; entry `i` scores item `i + 1`.
    fn score(&mut self, examples: &[&TrainingExample]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Frozen model scorer.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub hyper: &'a HyperParams,
}

impl Scorer for ModelScorer<'_> {
    fn num_items(&self) -> usize {
        self.params.num_items()
    }

    fn score(&mut self, examples: &[&TrainingExample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let out = forward_batch(&Batch::from_examples(examples), self.params, self.hyper)?;
        Ok(out.into_iter().map(|d| d.probs).collect())
    }
}

/// Independent uniform scores; a chance-level baseline.
pub struct RandomScorer {
    num_items: usize,
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(num_items: usize, seed: u64) -> Self {
        Self { num_items, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Scorer for RandomScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score(&mut self, examples: &[&TrainingExample]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(examples
            .iter()
            .map(|_| (0..self.num_items).map(|_| self.rng.gen::<f64>()).collect())
            .collect())
    }
}

/// Ranks of every example's target, scored in chunks of `chunk`.
pub fn collect_ranks(
    scorer: &mut dyn Scorer,
    examples: &[TrainingExample],
    chunk: usize,
) -> Result<Vec<usize>, EvalError> {
    let mut ranks = Vec::with_capacity(examples.len());
    for part in examples.chunks(chunk.max(1)) {
        let refs: Vec<&TrainingExample> = part.iter().collect();
        for (scores, e) in scorer.score(&refs)?.iter().zip(part) {
            ranks.push(rank_in_scores(scores, e.target)?);
        }
    }
    Ok(ranks)
}

fn cutoff_metrics(ranks: &[usize], cutoffs: &[usize]) -> Result<Vec<CutoffMetrics>, EvalError> {
    cutoffs
        .iter()
        .map(|&k| hr_mrr(ranks, k).map(|(hr, mrr)| CutoffMetrics { k, hr, mrr }))
        .collect()
}

/// Scores every example, then aggregates per cutoff and per prefix-length bucket.
pub fn evaluate(
    scorer: &mut dyn Scorer,
    examples: &[TrainingExample],
    cutoffs: &[usize],
    buckets: &[LengthBucket],
) -> Result<MetricsReport, EvalError> {
    if cutoffs.iter().any(|&k| k == 0) {
        return Err(EvalError::InvalidCutoff);
    }
    let start = Instant::now();
    let ranks = collect_ranks(scorer, examples, 100)?;
    let overall = cutoff_metrics(&ranks, cutoffs)?;
    let mut per_bucket = Vec::with_capacity(buckets.len());
    for &bucket in buckets {
        let r: Vec<usize> = ranks
            .iter()
            .zip(examples)
            .filter(|(_, e)| bucket.contains(e.prefix.len()))
            .map(|(&r, _)| r)
            .collect();
        let metrics = if r.is_empty() { Vec::new() } else { cutoff_metrics(&r, cutoffs)? };
        per_bucket.push(BucketMetrics { bucket, examples: r.len(), metrics });
    }
    Ok(MetricsReport {
        examples: examples.len(),
        overall,
        buckets: per_bucket,
        eval_seconds: start.elapsed().as_secs_f64(),
        train_epoch_seconds: None,
    })
}
