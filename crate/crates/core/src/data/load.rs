use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, RawSession};

/// Supported raw log layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// Header `session_id,item_id,timestamp`; timestamp in epoch seconds.
    Csv,
    /// `user_id<TAB>item_id<TAB>timestamp` per line; header optional. Streams are
    /// grouped per user and cut into sessions later.
    Tsv,
}

const CSV_HEADER: [&str; 3] = ["session_id", "item_id", "timestamp"];
const TSV_HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

/// Reads a log file and groups events by session (or user) id.
pub fn load_events(path: &Path, format: InputFormat) -> Result<Vec<RawSession>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_events(&text, format)
}

/// Parses log text. Groups appear in first-seen order; events within a group
/// are stably sorted by timestamp.
pub fn parse_events(text: &str, format: InputFormat) -> Result<Vec<RawSession>, DataError> {
    let (sep, header) = match format {
        InputFormat::Csv => (',', CSV_HEADER),
        InputFormat::Tsv => ('\t', TSV_HEADER),
    };
    let mut groups: Vec<RawSession> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        if !saw_header && groups.is_empty() && fields == header {
            saw_header = true;
            continue;
        }
        if format == InputFormat::Csv && !saw_header {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("expected header `{}`", CSV_HEADER.join(",")),
            });
        }
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::Parse { line: lineno, message: "empty id".into() });
        }
        let ts: i64 = fields[2].parse().map_err(|_| DataError::Parse {
            line: lineno,
            message: format!("bad timestamp `{}`", fields[2]),
        })?;
        let slot = *by_id.entry(fields[0].to_string()).or_insert_with(|| {
            groups.push(RawSession { id: fields[0].to_string(), items: vec![], timestamps: vec![] });
            groups.len() - 1
        });
        groups[slot].items.push(fields[1].to_string());
        groups[slot].timestamps.push(ts);
    }
    if groups.is_empty() {
        return Err(DataError::EmptyInput);
    }
    for g in &mut groups {
        let mut order: Vec<usize> = (0..g.items.len()).collect();
        order.sort_by_key(|&k| g.timestamps[k]);
        g.items = order.iter().map(|&k| g.items[k].clone()).collect();
        g.timestamps = order.iter().map(|&k| g.timestamps[k]).collect();
    }
    Ok(groups)
}
