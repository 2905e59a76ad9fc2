//! Command-line front end: `prep`, `train`, `eval`, `recommend`, `sweep`, `probe`.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::data::DataError;
use crate::eval::EvalError;
use crate::model::Variant;
use crate::sparsity::SparsityError;
use crate::training::TrainError;

pub use commands::{
    cmd_eval, cmd_prep, cmd_probe, cmd_recommend, cmd_sweep, cmd_train, emit_plot_data, parse_probe_output,
    recommend_line, SweepRow,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error("checkpoint vocabulary ({checkpoint}) does not match dataset vocabulary ({dataset})")]
    VocabularyMismatch { checkpoint: String, dataset: String },
    #[error("unknown item ids: {}", .0.join(", "))]
    UnknownItem(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Parser)]
#[command(name = "attenmix", version, about = "Session-based next-item recommendation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ATTENMIX_OUT", default_value = "attenmix-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, split and augment raw events into a dataset cache.
    Prep {
        /// Raw event file (overrides `data.input`).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Cache path (default `<out>/dataset.json`).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train and keep the best checkpoint by validation MRR@20.
    Train {
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        model: ModelOverrides,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint (default `<out>/model.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Comma-separated cutoffs (overrides `eval.cutoffs`).
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Evaluate every checkpoint under this sweep directory and write
        /// HR@20 series files into `<out>/plot`.
        #[arg(long, value_name = "SWEEP_DIR")]
        emit_plot_data: Option<PathBuf>,
    },
    /// Rank items for sessions read from stdin, one per line.
    Recommend {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        topk: usize,
    },
    /// Train and evaluate over a grid of levels, heads and learning rates.
    Sweep {
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
    },
    /// Track weight density under the variational sparsity probe.
    Probe {
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Comma-separated parameter names to probe.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Args, Default)]
pub struct ModelOverrides {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut Config) {
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(d) = self.dim {
            cfg.model.dim = d;
        }
        if let Some(l) = self.levels {
            cfg.model.levels = l;
        }
        if let Some(h) = self.heads {
            cfg.model.heads = h;
        }
    }
}

/// Runs one parsed invocation. Human-readable results go to `stdout`.
pub fn run(
    cli: Cli,
    stdin: &mut dyn std::io::BufRead,
    stdout: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    }
    .with_seed(cli.seed);
    let out = cli.out;
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let default_cache = out.join("dataset.json");
    let default_ckpt = out.join("model.ckpt");
    match cli.command {
        Command::Prep { input, cache } => {
            if let Some(i) = input {
                cfg.data.input = Some(i);
            }
            cmd_prep(&cfg, &cache.unwrap_or(default_cache), stdout)
        }
        Command::Train { cache, model, lr, epochs, batch_size } => {
            model.apply(&mut cfg);
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            cmd_train(&cfg, &cache.unwrap_or(default_cache), &out, stdout).map(|_| ())
        }
        Command::Eval { checkpoint, cache, cutoffs, emit_plot_data: sweep_dir } => {
            if let Some(c) = cutoffs {
                cfg.eval.cutoffs = c;
            }
            let cache = cache.unwrap_or(default_cache);
            match sweep_dir {
                Some(dir) => emit_plot_data(&cfg, &dir, &cache, &out.join("plot"), stdout),
                None => cmd_eval(&cfg, &checkpoint.unwrap_or(default_ckpt), &cache, &out, stdout).map(|_| ()),
            }
        }
        Command::Recommend { checkpoint, topk } => {
            cmd_recommend(&checkpoint.unwrap_or(default_ckpt), topk, stdin, stdout)
        }
        Command::Sweep { cache, levels, heads, lrs } => {
            if let Some(l) = levels {
                cfg.sweep.levels = l;
            }
            if let Some(h) = heads {
                cfg.sweep.heads = h;
            }
            if let Some(l) = lrs {
                cfg.sweep.lrs = l;
            }
            cmd_sweep(&cfg, &cache.unwrap_or(default_cache), &out, stdout).map(|_| ())
        }
        Command::Probe { cache, lambda, targets, epochs } => {
            if let Some(l) = lambda {
                cfg.probe.lambda = l;
            }
            if let Some(t) = targets {
                cfg.probe.targets = t;
            }
            if let Some(e) = epochs {
                cfg.probe.epochs = e;
            }
            cmd_probe(&cfg, &cache.unwrap_or(default_cache), &out, stdout).map(|_| ())
        }
    }
}
