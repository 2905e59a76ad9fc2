//! Cross-entropy training with Adam, validation-based model selection and
//! checkpoints.

mod adam;
mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_iter, ItemIndex, SessionDataset};
use crate::eval::{collect_ranks, hr_mrr, EvalError, ModelScorer};
use crate::model::{
    batch_loss, init_params, Distribution, GraphContext, HyperParams, IdentityEncoder, ModelError,
    ModelParams, ModelVars,
};
use crate::numerics::{grad, NumericsError, PROB_FLOOR};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Cutoff of the validation metric used for model selection.
pub const SELECTION_CUTOFF: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("target {target} outside 1..={num_items}")]
    InvalidTarget { target: ItemIndex, num_items: usize },
    #[error("non-finite update for {param}")]
    NonFiniteUpdate { param: String },
    #[error("non-finite value in epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            batch_size: 100,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `-ln max(p[target], 1e-30)`.
pub fn cross_entropy(dist: &Distribution, target: ItemIndex) -> Result<f64, TrainError> {
    match dist.prob(target) {
        Some(p) => Ok(-p.max(PROB_FLOOR).ln()),
        None => Err(TrainError::InvalidTarget { target, num_items: dist.len() }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        if self.best.map_or(true, |b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example training loss over the epoch.
    pub loss: f64,
    pub hr20: f64,
    pub mrr20: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tloss\thr@20\tmrr@20\tseconds";

    pub fn to_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}", self.epoch, self.loss, self.hr20, self.mrr20, self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Wall time of the whole run, including validation.
    pub train_seconds: f64,
}

/// HR@20 and MRR@20 of `params` on `examples`.
pub fn validation_metrics(
    params: &ModelParams,
    hyper: &HyperParams,
    examples: &[crate::data::TrainingExample],
) -> Result<(f64, f64), TrainError> {
    let ranks = collect_ranks(&mut ModelScorer { params, hyper }, examples, 100)?;
    Ok(hr_mrr(&ranks, SELECTION_CUTOFF)?)
}

/// Gradient of the mean batch loss plus its Adam update; returns the loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    batch: &crate::data::Batch,
    hyper: &HyperParams,
) -> Result<f64, TrainError> {
    let rec = {
        let p: &ModelParams = params;
        grad(p.set(), |tape, vars| -> Result<_, ModelError> {
            let mv = ModelVars::from_vars(p, vars);
            batch_loss(tape, &mut GraphContext::plain(), &mv, batch, hyper, &IdentityEncoder)
        })?
    };
    adam_step(params.set_mut(), &rec, state)?;
    Ok(rec.loss)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::NonFiniteUpdate { .. }
            | TrainError::Model(ModelError::Numerics(
                NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. }
            ))
    )
}

/// Trains from a seeded initialization, keeping the parameters with the best
/// validation MRR@20. `on_epoch` sees each record as it is produced.
pub fn fit(
    dataset: &SessionDataset,
    hyper: &HyperParams,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    hyper.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dataset.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut params = init_params(dataset.num_items(), hyper, config.seed)?;
    let mut state = OptimizerState::new(params.set(), config.adam());
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = Checkpoint::new(hyper.clone(), dataset.vocabulary.clone(), params.clone());
    best.meta.seed = config.seed;
    best.meta.config = serde_json::to_value(config).unwrap_or_default();
    let mut log = Vec::new();
    let started = Instant::now();
    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut total = 0.0;
        let batches = batch_iter(&dataset.train, config.batch_size, Some(epoch_seed(config.seed, epoch)));
        for (b, batch) in batches.enumerate() {
            let loss = train_step(&mut params, &mut state, &batch, hyper).map_err(|e| {
                if is_non_finite(&e) {
                    TrainError::NonFinite { epoch, batch: b, detail: e.to_string() }
                } else {
                    e
                }
            })?;
            total += loss * batch.len() as f64;
        }
        let (hr20, mrr20) = validation_metrics(&params, hyper, &dataset.validation)?;
        let record = EpochRecord {
            epoch,
            loss: total / dataset.train.len() as f64,
            hr20,
            mrr20,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        match stopper.observe(mrr20) {
            StopDecision::Improved => {
                best.params = params.clone();
                best.meta.epoch = epoch;
                best.meta.validation_mrr = mrr20;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(FitOutcome { best, log, train_seconds: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        let uniform = Distribution { probs: vec![0.25; 4] };
        assert!((cross_entropy(&uniform, 3).unwrap() - 4f64.ln()).abs() < 1e-15);
        let sure = Distribution { probs: vec![0.0, 1.0] };
        assert_eq!(cross_entropy(&sure, 2).unwrap(), 0.0);
        assert!((cross_entropy(&sure, 1).unwrap() - 1e30f64.ln()).abs() < 1e-9);
        let d = Distribution { probs: vec![0.7, 0.2, 0.1] };
        assert!((cross_entropy(&d, 2).unwrap() - 1.6094379124341003).abs() < 1e-12);
        assert!(cross_entropy(&d, 0).is_err());
        assert!(cross_entropy(&d, 4).is_err());
    }

    #[test]
    fn early_stopper_contract() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(0.3), StopDecision::Improved);
        assert_eq!(s.observe(0.2), StopDecision::Stop);
        let mut s = EarlyStopper::new(2);
        s.observe(0.3);
        assert_eq!(s.observe(0.3), StopDecision::Continue);
        assert_eq!(s.observe(0.4), StopDecision::Improved);
        assert_eq!(s.best(), Some(0.4));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
