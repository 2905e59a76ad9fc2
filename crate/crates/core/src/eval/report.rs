use std::fmt::Write as _;

use super::MetricsReport;

/// `key = value` lines: `examples`, `hr@K`, `mrr@K`, `bucket.<range>.examples`,
/// `bucket.<range>.hr@K`, `bucket.<range>.mrr@K`, `eval_seconds` and, when known,
/// `train_epoch_seconds`.
pub fn render_report(r: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "examples = {}", r.examples);
    for m in &r.overall {
        let _ = writeln!(out, "hr@{} = {:.6}", m.k, m.hr);
        let _ = writeln!(out, "mrr@{} = {:.6}", m.k, m.mrr);
    }
    for b in &r.buckets {
        let _ = writeln!(out, "bucket.{}.examples = {}", b.bucket, b.examples);
        for m in &b.metrics {
            let _ = writeln!(out, "bucket.{}.hr@{} = {:.6}", b.bucket, m.k, m.hr);
            let _ = writeln!(out, "bucket.{}.mrr@{} = {:.6}", b.bucket, m.k, m.mrr);
        }
    }
    let _ = writeln!(out, "eval_seconds = {:.3}", r.eval_seconds);
    if let Some(t) = r.train_epoch_seconds {
        let _ = writeln!(out, "train_epoch_seconds = {t:.3}");
    }
    out
}

/// Tab-separated `bucket examples k hr mrr`, one row per bucket and cutoff.
pub fn render_bucket_table(r: &MetricsReport) -> String {
    let mut out = String::from("bucket\texamples\tk\thr\tmrr\n");
    for b in &r.buckets {
        for m in &b.metrics {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.6}", b.bucket, b.examples, m.k, m.hr, m.mrr);
        }
    }
    out
}
