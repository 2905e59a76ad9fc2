use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::vocab::external_id_cmp;
use super::{DataError, RawSession, Session, Vocabulary};

/// Session/item filtering thresholds. `top_k_items == 0` disables the popularity cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub min_session_len: usize,
    pub min_item_freq: u64,
    pub top_k_items: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { min_session_len: 2, min_item_freq: 5, top_k_items: 0 }
    }
}

fn item_counts(sessions: &[RawSession]) -> HashMap<&str, u64> {
    let mut counts = HashMap::new();
    for s in sessions {
        for it in &s.items {
            *counts.entry(it.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// Repeatedly drops infrequent (or non-top-k) items and short sessions until
/// nothing changes.
pub fn filter_raw(
    sessions: &[RawSession],
    t: FilterThresholds,
) -> Result<Vec<RawSession>, DataError> {
    let mut current: Vec<RawSession> = sessions.to_vec();
    loop {
        let counts = item_counts(&current);
        let mut ranked: Vec<(&str, u64)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| external_id_cmp(a.0, b.0)));
        let cap = if t.top_k_items == 0 { usize::MAX } else { t.top_k_items };
        let keep: HashSet<String> = ranked
            .iter()
            .filter(|(_, c)| *c >= t.min_item_freq)
            .take(cap)
            .map(|(id, _)| id.to_string())
            .collect();

        let mut changed = false;
        let mut next = Vec::with_capacity(current.len());
        for s in &current {
            let mut items = Vec::with_capacity(s.items.len());
            let mut stamps = Vec::with_capacity(s.items.len());
            for (it, &ts) in s.items.iter().zip(&s.timestamps) {
                if keep.contains(it) {
                    items.push(it.clone());
                    stamps.push(ts);
                }
            }
            if items.len() != s.items.len() {
                changed = true;
            }
            if items.len() < t.min_session_len.max(1) {
                changed = true;
                continue;
            }
            next.push(RawSession { id: s.id.clone(), items, timestamps: stamps });
        }
        current = next;
        if !changed {
            break;
        }
    }
    if current.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }
    Ok(current)
}

/// Filters to a fixpoint, then re-indexes the surviving items densely.
pub fn filter_and_index(
    sessions: &[RawSession],
    t: FilterThresholds,
) -> Result<(Vec<Session>, Vocabulary), DataError> {
    let kept = filter_raw(sessions, t)?;
    let vocab = Vocabulary::from_counts(
        item_counts(&kept).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    );
    let indexed = index_sessions(&kept, &vocab);
    Ok((indexed, vocab))
}

/// Maps external ids through `vocab`, silently dropping unknown items.
pub(crate) fn index_sessions(sessions: &[RawSession], vocab: &Vocabulary) -> Vec<Session> {
    sessions
        .iter()
        .map(|s| Session {
            id: s.id.clone(),
            items: s.items.iter().filter_map(|it| vocab.index_of(it)).collect(),
            last_timestamp: s.end_time(),
        })
        .collect()
}
