use serde::{Deserialize, Serialize};

use super::{DataError, RawSession, Timed};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// How sessions are divided into train and test by time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SplitRule {
    /// Sessions ending within the final 7 days of the log are test.
    LastWeek,
    /// The temporally last `fraction` of sessions are test.
    LastFraction { fraction: f64 },
    /// Cut user streams at gaps longer than `gap_seconds`, then take the last fraction.
    IntervalLastFraction { gap_seconds: i64, fraction: f64 },
}

impl SplitRule {
    fn validate(&self) -> Result<(), DataError> {
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        match *self {
            SplitRule::LastWeek => Ok(()),
            SplitRule::LastFraction { fraction } if frac_ok(fraction) => Ok(()),
            SplitRule::IntervalLastFraction { gap_seconds, fraction }
                if frac_ok(fraction) && gap_seconds > 0 =>
            {
                Ok(())
            }
            other => Err(DataError::InvalidRule(format!("{other:?}"))),
        }
    }
}

/// Cuts each event stream into sessions wherever consecutive events are more
/// than `gap_seconds` apart. Session ids are `<stream id>:<k>`.
pub fn sessionize(streams: &[RawSession], gap_seconds: i64) -> Vec<RawSession> {
    let mut out = Vec::new();
    for s in streams {
        let mut k = 0;
        let mut cur = RawSession { id: format!("{}:{k}", s.id), items: vec![], timestamps: vec![] };
        for (it, &ts) in s.items.iter().zip(&s.timestamps) {
            if let Some(&last) = cur.timestamps.last() {
                if ts - last > gap_seconds {
                    k += 1;
                    let done = std::mem::replace(
                        &mut cur,
                        RawSession { id: format!("{}:{k}", s.id), items: vec![], timestamps: vec![] },
                    );
                    out.push(done);
                }
            }
            cur.items.push(it.clone());
            cur.timestamps.push(ts);
        }
        if !cur.items.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ordered<T: Timed + Clone>(sessions: &[T]) -> Vec<T> {
    let mut v = sessions.to_vec();
    v.sort_by(|a, b| a.end_time().cmp(&b.end_time()).then_with(|| a.key().cmp(b.key())));
    v
}

fn split_fraction<T: Timed + Clone>(sessions: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let mut all = ordered(sessions);
    let n_test = ((all.len() as f64) * fraction).round() as usize;
    let test = all.split_off(all.len() - n_test.min(all.len()));
    (all, test)
}

fn nonempty<T>(train: Vec<T>, test: Vec<T>) -> Result<(Vec<T>, Vec<T>), DataError> {
    if train.is_empty() {
        return Err(DataError::DegenerateSplit { side: "train" });
    }
    if test.is_empty() {
        return Err(DataError::DegenerateSplit { side: "test" });
    }
    Ok((train, test))
}

/// Splits sessions (not examples) by end time. Both sides are returned in
/// temporal order; every train session ends no later than any test session.
pub fn temporal_split<T: Timed + Clone>(
    sessions: &[T],
    rule: SplitRule,
) -> Result<(Vec<T>, Vec<T>), DataError> {
    rule.validate()?;
    match rule {
        SplitRule::LastWeek => {
            let all = ordered(sessions);
            let Some(max_end) = all.last().map(Timed::end_time) else {
                return Err(DataError::DegenerateSplit { side: "train" });
            };
            let cutoff = max_end - 7 * SECONDS_PER_DAY;
            let (train, test): (Vec<T>, Vec<T>) = all.into_iter().partition(|s| s.end_time() <= cutoff);
            nonempty(train, test)
        }
        SplitRule::LastFraction { fraction } | SplitRule::IntervalLastFraction { fraction, .. } => {
            let (train, test) = split_fraction(sessions, fraction);
            nonempty(train, test)
        }
    }
}

/// Interval rule applied to raw user streams: sessionize first, then split.
pub fn temporal_split_streams(
    streams: &[RawSession],
    rule: SplitRule,
) -> Result<(Vec<RawSession>, Vec<RawSession>), DataError> {
    match rule {
        SplitRule::IntervalLastFraction { gap_seconds, .. } => {
            rule.validate()?;
            temporal_split(&sessionize(streams, gap_seconds), rule)
        }
        other => temporal_split(streams, other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, ts: &[i64]) -> RawSession {
        RawSession {
            id: id.into(),
            items: ts.iter().map(|t| format!("i{t}")).collect(),
            timestamps: ts.to_vec(),
        }
    }

    #[test]
    fn last_fraction_takes_latest() {
        let sessions: Vec<RawSession> = (0..10).rev().map(|i| raw(&format!("s{i}"), &[i * 10])).collect();
        let (train, test) = temporal_split(&sessions, SplitRule::LastFraction { fraction: 0.2 }).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["s8", "s9"]);
        let max_train = train.iter().map(|s| s.end_time()).max().unwrap();
        let min_test = test.iter().map(|s| s.end_time()).min().unwrap();
        assert!(max_train <= min_test);
    }

    #[test]
    fn interval_cut() {
        let h = 3600;
        let streams = vec![raw("u", &[0, h, 10 * h])];
        let out = sessionize(&streams, 8 * h);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].timestamps, vec![0, h]);
        assert_eq!(out[1].id, "u:1");
        let streams = vec![raw("u", &[0, 9 * h])];
        assert_eq!(sessionize(&streams, 8 * h).len(), 2);
    }

    #[test]
    fn last_week_degenerate() {
        let sessions: Vec<RawSession> = (0..5).map(|i| raw(&format!("s{i}"), &[i * 100])).collect();
        assert!(matches!(
            temporal_split(&sessions, SplitRule::LastWeek),
            Err(DataError::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn last_week_boundary() {
        let day = SECONDS_PER_DAY;
        let sessions = vec![raw("a", &[0]), raw("b", &[2 * day]), raw("c", &[10 * day])];
        let (train, test) = temporal_split(&sessions, SplitRule::LastWeek).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test[0].id, "c");
    }

    #[test]
    fn invalid_rules() {
        let s = vec![raw("a", &[0])];
        assert!(matches!(
            temporal_split(&s, SplitRule::LastFraction { fraction: 1.5 }),
            Err(DataError::InvalidRule(_))
        ));
        assert!(matches!(
            temporal_split(&s, SplitRule::IntervalLastFraction { gap_seconds: 0, fraction: 0.2 }),
            Err(DataError::InvalidRule(_))
        ));
    }

    #[test]
    fn streams_are_sessionized_before_split() {
        let h = 3600;
        let streams = vec![raw("u", &[0, 20 * h, 40 * h, 60 * h, 80 * h])];
        let rule = SplitRule::IntervalLastFraction { gap_seconds: 8 * h, fraction: 0.2 };
        let (train, test) = temporal_split_streams(&streams, rule).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
    }
}
