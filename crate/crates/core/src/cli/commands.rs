use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{io_err, CliError};
use crate::config::Config;
use crate::data::{load_cache, load_events, prepare, save_cache, ItemIndex, PreparedDataset, Vocabulary};
use crate::eval::{evaluate, render_bucket_table, render_report, MetricsReport, ModelScorer};
use crate::model::{forward, HyperParams};
use crate::sparsity::{probe_run, DensityRecord, DensityReport, SparsityError};
use crate::training::{
    fit, load_checkpoint, save_checkpoint, validation_metrics, Checkpoint, EpochRecord, TrainError,
};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn say(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn config_line(cfg: &Config) -> String {
    format!("# config = {}\n", cfg.to_json())
}

fn load_dataset(cache: &Path) -> Result<PreparedDataset, CliError> {
    Ok(load_cache(cache)?)
}

/// Reads raw events, prepares the dataset and writes the JSON cache.
pub fn cmd_prep(cfg: &Config, cache: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let input = cfg
        .data
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("prep needs --input or data.input".into()))?;
    let opts = cfg.data.prep_options();
    let raw = load_events(input, opts.format)?;
    let mut prepared = prepare(&raw, &input.display().to_string(), &opts)?;
    let mut resolved = cfg.clone();
    resolved.data.input = None;
    prepared.provenance.config = resolved.to_json();
    if let Some(dir) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_cache(cache, &prepared)?;
    let s = &prepared.provenance.summary;
    let mut text = String::new();
    let _ = writeln!(text, "clicks = {}", s.clicks);
    let _ = writeln!(text, "sessions = {}", s.sessions);
    let _ = writeln!(text, "items = {}", s.items);
    let _ = writeln!(text, "average_length = {:.3}", s.average_length);
    let _ = writeln!(text, "train_examples = {}", s.train_examples);
    let _ = writeln!(text, "validation_examples = {}", s.validation_examples);
    let _ = writeln!(text, "test_examples = {}", s.test_examples);
    let _ = writeln!(text, "dropped_test_events = {}", prepared.provenance.dropped_test_events);
    let _ = writeln!(text, "dropped_test_sessions = {}", prepared.provenance.dropped_test_sessions);
    let _ = writeln!(text, "cache = {}", cache.display());
    say(stdout, &text)
}

fn train_log(cfg: &Config, log: &[EpochRecord]) -> String {
    let mut text = config_line(cfg);
    text.push_str(EpochRecord::HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    text
}

/// Mean `seconds` column of a training log.
fn mean_epoch_seconds(log: &str) -> Option<f64> {
    let secs: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .filter_map(|l| l.rsplit('\t').next()?.parse().ok())
        .collect();
    (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64)
}

fn train_into(cfg: &Config, data: &PreparedDataset, dir: &Path, stdout: &mut dyn Write) -> Result<Checkpoint, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut lines = String::new();
    let outcome = fit(&data.dataset, &cfg.model, &cfg.train, &mut |r| {
        let _ = writeln!(lines, "{}", r.to_line());
    })?;
    say(stdout, &format!("{}\n{lines}", EpochRecord::HEADER))?;
    let mut best = outcome.best;
    best.meta.config = cfg.to_json();
    save_checkpoint(&best, &dir.join("model.ckpt"))?;
    write_file(&dir.join("train.log"), &train_log(cfg, &outcome.log))?;
    Ok(best)
}

/// Trains on the cached dataset; writes `model.ckpt` and `train.log` into `out`.
pub fn cmd_train(cfg: &Config, cache: &Path, out: &Path, stdout: &mut dyn Write) -> Result<Checkpoint, CliError> {
    let data = load_dataset(cache)?;
    let best = train_into(cfg, &data, out, stdout)?;
    say(
        stdout,
        &format!("best_epoch = {}\nvalidation_mrr@20 = {:.6}\n", best.meta.epoch, best.meta.validation_mrr),
    )?;
    Ok(best)
}

fn check_vocabulary(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<(), CliError> {
    let (a, b) = (&ckpt.meta.vocabulary_digest, vocab.digest());
    if *a != b {
        return Err(CliError::VocabularyMismatch {
            checkpoint: format!("{} items, {}", a.size, a.sha256),
            dataset: format!("{} items, {}", b.size, b.sha256),
        });
    }
    Ok(())
}

fn evaluate_checkpoint(cfg: &Config, ckpt: &Checkpoint, data: &PreparedDataset) -> Result<MetricsReport, CliError> {
    check_vocabulary(ckpt, &data.dataset.vocabulary)?;
    let mut scorer = ModelScorer { params: &ckpt.params, hyper: ckpt.hyper() };
    Ok(evaluate(&mut scorer, &data.dataset.test, &cfg.eval.cutoffs, &cfg.eval.buckets)?)
}

/// Evaluates a checkpoint on the test split; writes `report.txt` and `buckets.tsv`.
pub fn cmd_eval(
    cfg: &Config,
    checkpoint: &Path,
    cache: &Path,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<MetricsReport, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = load_dataset(cache)?;
    let mut report = evaluate_checkpoint(cfg, &ckpt, &data)?;
    let log = checkpoint.with_file_name("train.log");
    report.train_epoch_seconds = std::fs::read_to_string(log).ok().and_then(|t| mean_epoch_seconds(&t));
    let body = render_report(&report);
    let mut text = String::new();
    let _ = writeln!(text, "# checkpoint = {}", checkpoint.display());
    let _ = writeln!(text, "# seed = {}", ckpt.meta.seed);
    let _ = writeln!(text, "# checkpoint_config = {}", ckpt.meta.config);
    text.push_str(&config_line(cfg));
    text.push_str(&body);
    write_file(&out.join("report.txt"), &text)?;
    write_file(&out.join("buckets.tsv"), &render_bucket_table(&report))?;
    say(stdout, &body)?;
    Ok(report)
}

/// Ranks the session on one input line: ids separated by whitespace or commas.
/// Returns `id:score` pairs, best first.
pub fn recommend_line(ckpt: &Checkpoint, line: &str, topk: usize) -> Result<String, CliError> {
    let vocab = ckpt.vocabulary();
    let ids: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
    let unknown: Vec<String> = ids.iter().filter(|i| vocab.index_of(i).is_none()).map(|s| s.to_string()).collect();
    if !unknown.is_empty() {
        return Err(CliError::UnknownItem(unknown));
    }
    if ids.is_empty() {
        return Err(CliError::Usage("empty session".into()));
    }
    let prefix: Vec<ItemIndex> = ids.iter().filter_map(|i| vocab.index_of(i)).collect();
    let dist = forward(&prefix, &ckpt.params, ckpt.hyper()).map_err(TrainError::from)?;
    let parts: Vec<String> = dist
        .top_k(topk)
        .into_iter()
        .map(|(i, p)| format!("{}:{p:.6}", vocab.external_id(i).unwrap_or("?")))
        .collect();
    Ok(parts.join(" "))
}

/// Answers each non-empty stdin line with one recommendation line.
pub fn cmd_recommend(
    checkpoint: &Path,
    topk: usize,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    for line in stdin.lines() {
        let line = line.map_err(|e| io_err(Path::new("<stdin>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let answer = recommend_line(&ckpt, &line, topk)?;
        say(stdout, &format!("{answer}\n"))?;
    }
    Ok(())
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub levels: usize,
    pub heads: usize,
    pub lr: f64,
    pub hr20: f64,
    pub mrr20: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

impl SweepRow {
    const HEADER: &'static str = "levels\theads\tlr\thr@20\tmrr@20\tseconds\tstatus";

    fn to_line(&self) -> String {
        let status = self.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"));
        format!(
            "{}\t{}\t{:?}\t{:.6}\t{:.6}\t{:.3}\t{status}",
            self.levels, self.heads, self.lr, self.hr20, self.mrr20, self.seconds
        )
    }
}

fn point_dir(root: &Path, levels: usize, heads: usize, lr: f64) -> PathBuf {
    root.join(format!("L{levels}_H{heads}_lr{lr:?}"))
}

/// Trains every (levels, heads, lr) point from the same seed. Each point gets
/// its own directory under `<out>/sweep`; a failing point is recorded and the
/// sweep moves on. Also writes HR@20 series into `<out>/plot`.
pub fn cmd_sweep(cfg: &Config, cache: &Path, out: &Path, stdout: &mut dyn Write) -> Result<Vec<SweepRow>, CliError> {
    let data = load_dataset(cache)?;
    let root = out.join("sweep");
    let lrs = if cfg.sweep.lrs.is_empty() { vec![cfg.train.lr] } else { cfg.sweep.lrs.clone() };
    let mut rows = Vec::new();
    say(stdout, &format!("{}\n", SweepRow::HEADER))?;
    for &levels in &cfg.sweep.levels {
        for &heads in &cfg.sweep.heads {
            for &lr in &lrs {
                let mut point = cfg.clone();
                point.model.levels = levels;
                point.model.heads = heads;
                point.train.lr = lr;
                if !point.eval.cutoffs.contains(&20) {
                    point.eval.cutoffs.push(20);
                }
                let t0 = Instant::now();
                let result = train_into(&point, &data, &point_dir(&root, levels, heads, lr), &mut std::io::sink())
                    .and_then(|ckpt| evaluate_checkpoint(&point, &ckpt, &data));
                let seconds = t0.elapsed().as_secs_f64();
                let mut row = SweepRow { levels, heads, lr, hr20: 0.0, mrr20: 0.0, seconds, error: None };
                match result {
                    Ok(report) => {
                        let m = report.at(20).expect("cutoff 20 is configured");
                        row.hr20 = m.hr;
                        row.mrr20 = m.mrr;
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                say(stdout, &format!("{}\n", row.to_line()))?;
                rows.push(row);
            }
        }
    }
    let mut table = config_line(cfg);
    table.push_str(SweepRow::HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.to_line());
        table.push('\n');
    }
    write_file(&root.join("sweep.tsv"), &table)?;
    write_plot_series(&rows, &out.join("plot"))?;
    Ok(rows)
}

fn write_plot_series(rows: &[SweepRow], dir: &Path) -> Result<(), CliError> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mut levels: Vec<usize> = ok.iter().map(|r| r.levels).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut heads: Vec<usize> = ok.iter().map(|r| r.heads).collect();
    heads.sort_unstable();
    heads.dedup();
    for &l in &levels {
        let mut text = String::from("heads\tlr\thr@20\n");
        for r in ok.iter().filter(|r| r.levels == l) {
            let _ = writeln!(text, "{}\t{:?}\t{:.6}", r.heads, r.lr, r.hr20);
        }
        write_file(&dir.join(format!("hr20_vs_H.L{l}.tsv")), &text)?;
    }
    for &h in &heads {
        let mut text = String::from("levels\tlr\thr@20\n");
        for r in ok.iter().filter(|r| r.heads == h) {
            let _ = writeln!(text, "{}\t{:?}\t{:.6}", r.levels, r.lr, r.hr20);
        }
        write_file(&dir.join(format!("hr20_vs_L.H{h}.tsv")), &text)?;
    }
    Ok(())
}

/// Evaluates every `model.ckpt` one level below `sweep_dir` and writes HR@20
/// series against heads (per level count) and against levels (per head count).
pub fn emit_plot_data(
    cfg: &Config,
    sweep_dir: &Path,
    cache: &Path,
    plot_dir: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let data = load_dataset(cache)?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(sweep_dir)
        .map_err(|e| io_err(sweep_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("model.ckpt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no checkpoints under {}", sweep_dir.display())));
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let ckpt = load_checkpoint(&dir.join("model.ckpt"))?;
        let h: &HyperParams = ckpt.hyper();
        let lr = ckpt.meta.config.pointer("/train/lr").and_then(|v| v.as_f64()).unwrap_or(cfg.train.lr);
        let t0 = Instant::now();
        let mut row = SweepRow { levels: h.levels, heads: h.heads, lr, hr20: 0.0, mrr20: 0.0, seconds: 0.0, error: None };
        check_vocabulary(&ckpt, &data.dataset.vocabulary)?;
        let (hr, mrr) = validation_metrics(&ckpt.params, h, &data.dataset.test)?;
        row.hr20 = hr;
        row.mrr20 = mrr;
        row.seconds = t0.elapsed().as_secs_f64();
        say(stdout, &format!("{}\t{}\n", dir.display(), row.to_line()))?;
        rows.push(row);
    }
    write_plot_series(&rows, plot_dir)
}

/// Runs the sparsity probe and writes `probe.tsv`.
pub fn cmd_probe(cfg: &Config, cache: &Path, out: &Path, stdout: &mut dyn Write) -> Result<DensityReport, CliError> {
    let data = load_dataset(cache)?;
    let report = probe_run(&data.dataset, &cfg.model, &cfg.probe)?;
    let text = report.render();
    write_file(&out.join("probe.tsv"), &text)?;
    say(stdout, &text)?;
    Ok(report)
}

/// Parses the output of [`DensityReport::render`].
pub fn parse_probe_output(text: &str) -> Result<DensityReport, SparsityError> {
    let bad = |m: String| SparsityError::InvalidConfig(m);
    let mut report = DensityReport { threshold: f64::NAN, lambda: f64::NAN, records: Vec::new(), losses: Vec::new() };
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            let (key, value) = rest.split_once('=').ok_or_else(|| bad(format!("header line {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "threshold" => report.threshold = value.parse().map_err(|_| bad(format!("threshold {value:?}")))?,
                "lambda" => report.lambda = value.parse().map_err(|_| bad(format!("lambda {value:?}")))?,
                "losses" => {
                    report.losses = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| bad(format!("loss {s:?}"))))
                        .collect::<Result<_, _>>()?
                }
                _ => {}
            }
            continue;
        }
        if line.starts_with("epoch\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("row {line:?}")));
        }
        let num = |s: &str| -> Result<usize, SparsityError> { s.parse().map_err(|_| bad(format!("row {line:?}"))) };
        report.records.push(DensityRecord {
            epoch: num(f[0])?,
            name: f[1].to_string(),
            rows: num(f[2])?,
            cols: num(f[3])?,
            rho: f[5].parse().map_err(|_| bad(format!("row {line:?}")))?,
        });
    }
    if report.threshold.is_nan() || report.lambda.is_nan() {
        return Err(bad("missing threshold or lambda header".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_seconds_from_log() {
        let log = "# config = {}\nepoch\tloss\thr@20\tmrr@20\tseconds\n1\t2.0\t0.1\t0.05\t1.500\n2\t1.0\t0.2\t0.1\t2.500\n";
        assert_eq!(mean_epoch_seconds(log), Some(2.0));
        assert_eq!(mean_epoch_seconds("epoch\tloss\n"), None);
    }

    #[test]
    fn sweep_row_formatting() {
        let r = SweepRow { levels: 2, heads: 4, lr: 0.001, hr20: 0.5, mrr20: 0.25, seconds: 1.0, error: None };
        assert_eq!(r.to_line(), "2\t4\t0.001\t0.500000\t0.250000\t1.000\tok");
        assert_eq!(point_dir(Path::new("s"), 2, 4, 0.001), Path::new("s/L2_H4_lr0.001"));
    }
}
