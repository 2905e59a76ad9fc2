//! Variational-weight sparsity probe: Gaussian posteriors on selected readout
//! weights, a KL penalty toward the standard normal, and the fraction of
//! weights whose mean stays above a magnitude threshold.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_iter, SessionDataset};
use crate::model::{batch_loss, init_params, GraphContext, HyperParams, IdentityEncoder, ModelError, ModelVars};
use crate::numerics::{
    grad, variance_of, variational_kernel, NumericsError, ParamSet, Tape, Tensor, Var, WeightLayout,
};
use crate::training::{adam_step, AdamConfig, OptimizerState, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("density ratio needs a rank-2 weight, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("unknown probe target `{0}`")]
    UnknownTarget(String),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<ModelError> for SparsityError {
    fn from(e: ModelError) -> Self {
        SparsityError::Train(TrainError::Model(e))
    }
}

/// Per-weight Gaussian posterior `N(theta, exp(logvar))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalWeight {
    pub theta: Tensor,
    pub logvar: Tensor,
}

/// Initial posterior variance.
pub const INIT_VARIANCE: f64 = 1e-4;

impl VariationalWeight {
    pub fn new(theta: Tensor) -> Self {
        let logvar = Tensor::zeros(theta.shape()).map(|_| INIT_VARIANCE.ln());
        Self { theta, logvar }
    }
}

/// Local-reparameterization sample of `a theta` (`theta` is input x output):
/// `gamma + sqrt(delta) * eps` with `gamma = a theta`, `delta = a^2 sigma^2`.
pub fn variational_forward(a: &Tensor, vw: &VariationalWeight, noise_seed: u64) -> Result<Tensor, SparsityError> {
    if vw.theta.shape() != vw.logvar.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "variational_forward",
            left: vw.theta.shape().to_vec(),
            right: vw.logvar.shape().to_vec(),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let n = a.rows() * vw.theta.cols();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::matrix(a.rows(), vw.theta.cols(), noise)?;
    let variance = vw.logvar.map(variance_of);
    Ok(variational_kernel(a, &vw.theta, &variance, WeightLayout::InOut, &noise)?.0)
}

/// `sum 0.5 (sigma^2 + theta^2 - 1 - ln sigma^2)`: KL to the standard normal.
pub fn kl_regularizer(vw: &VariationalWeight) -> f64 {
    vw.theta
        .data()
        .iter()
        .zip(vw.logvar.data())
        .map(|(&t, &lv)| 0.5 * (lv.exp() + t * t - 1.0 - lv))
        .sum()
}

fn kl_node(tape: &mut Tape<'_>, theta: Var, logvar: Var) -> Result<Var, NumericsError> {
    let var = tape.exp(logvar);
    let sq = tape.pow(theta, 2.0);
    let s = tape.add(var, sq)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5))
}

/// Fraction of entries with `|w| > threshold`.
pub fn density_ratio(w: &Tensor, threshold: f64) -> Result<f64, SparsityError> {
    if !(threshold > 0.0) {
        return Err(SparsityError::InvalidThreshold(threshold));
    }
    if w.rank() != 2 {
        return Err(SparsityError::NotAMatrix(w.shape().to_vec()));
    }
    let alive = w.data().iter().filter(|v| v.abs() > threshold).count();
    Ok(alive as f64 / w.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Parameter names given Gaussian posteriors, e.g. `merge`, `head_q.1`.
    pub targets: Vec<String>,
    /// Weight of the summed KL term.
    pub lambda: f64,
    pub threshold: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            targets: vec!["merge".into()],
            lambda: 1.0,
            threshold: 0.01,
            epochs: 10,
            lr: 1e-3,
            batch_size: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub epoch: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub threshold: f64,
    pub lambda: f64,
    /// Epoch 0 is the initialization.
    pub records: Vec<DensityRecord>,
    /// Mean objective (cross-entropy plus weighted KL) per epoch, from epoch 1.
    pub losses: Vec<f64>,
}

impl DensityReport {
    /// Density series of one matrix, in epoch order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.name == name).map(|r| r.rho).collect()
    }

    /// `#` header lines (threshold, lambda, per-epoch losses), then `epoch name M N threshold rho` tab-separated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# threshold = {:?}", self.threshold);
        let _ = writeln!(out, "# lambda = {:?}", self.lambda);
        let losses: Vec<String> = self.losses.iter().map(|l| format!("{l:?}")).collect();
        let _ = writeln!(out, "# losses = {}", losses.join(","));
        out.push_str("epoch\tname\tM\tN\tthreshold\trho\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:?}\t{:?}", r.epoch, r.name, r.rows, r.cols, self.threshold, r.rho);
        }
        out
    }
}

fn logvar_name(target: &str) -> String {
    format!("logvar.{target}")
}

/// Trains the model with the probed weights made variational and records
/// their density ratio before training and after every epoch.
pub fn probe_run(dataset: &SessionDataset, hyper: &HyperParams, cfg: &ProbeConfig) -> Result<DensityReport, SparsityError> {
    if cfg.targets.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.lambda >= 0.0) {
        return Err(SparsityError::InvalidConfig(format!("{cfg:?}")));
    }
    if !(cfg.threshold > 0.0) {
        return Err(SparsityError::InvalidThreshold(cfg.threshold));
    }
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit("train").into());
    }
    let model = init_params(dataset.num_items(), hyper, cfg.seed)?;
    for t in &cfg.targets {
        if t == "embedding" || model.set().get(t).is_none() {
            return Err(SparsityError::UnknownTarget(t.clone()));
        }
    }
    let model_len = model.set().len();
    let mut set = model.set().clone();
    for t in &cfg.targets {
        let vw = VariationalWeight::new(model.set().get(t).expect("checked").clone());
        set.insert(logvar_name(t), vw.logvar);
    }
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = OptimizerState::new(&set, adam);
    let mut records = Vec::new();
    let record = |set: &ParamSet, epoch: usize, out: &mut Vec<DensityRecord>| -> Result<(), SparsityError> {
        for t in &cfg.targets {
            let w = set.get(t).expect("checked");
            out.push(DensityRecord {
                epoch,
                name: t.clone(),
                rows: w.rows(),
                cols: w.cols(),
                rho: density_ratio(w, cfg.threshold)?,
            });
        }
        Ok(())
    };
    record(&set, 0, &mut records)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let shuffle = cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for (b, batch) in batch_iter(&dataset.train, cfg.batch_size, Some(shuffle)).enumerate() {
            let noise_seed = shuffle.wrapping_add((b as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
            let rec = grad(&set, |tape, vars| -> Result<Var, ModelError> {
                let mv = ModelVars::from_vars(&model, &vars[..model_len]);
                let mut ctx = GraphContext {
                    variational: HashMap::new(),
                    rng: Some(ChaCha8Rng::seed_from_u64(noise_seed)),
                };
                for (k, t) in cfg.targets.iter().enumerate() {
                    ctx.variational.insert(t.clone(), vars[model_len + k]);
                }
                let ce = batch_loss(tape, &mut ctx, &mv, &batch, hyper, &IdentityEncoder)?;
                let mut loss = ce;
                for (k, t) in cfg.targets.iter().enumerate() {
                    let theta = vars[model.set().position(t).expect("checked")];
                    let kl = kl_node(tape, theta, vars[model_len + k])?;
                    let weighted = tape.scale(kl, cfg.lambda);
                    loss = tape.add(loss, weighted)?;
                }
                Ok(loss)
            })
            .map_err(TrainError::from)?;
            adam_step(&mut set, &rec, &mut state)?;
            total += rec.loss * batch.len() as f64;
        }
        losses.push(total / dataset.train.len() as f64);
        record(&set, epoch, &mut records)?;
    }
    Ok(DensityReport { threshold: cfg.threshold, lambda: cfg.lambda, records, losses })
}
