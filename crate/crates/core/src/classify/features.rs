//! Per-user behavioral feature vectors.
//!
//! Only events inside the window count. With `n` such events and `H` the
//! window length in hours:
//!
//! | feature | definition |
//! |---|---|
//! | posting_rate | `n / H` |
//! | retweet_ratio, reply_ratio, mention_ratio | share of events with that action |
//! | distinct_hashtag_rate | distinct hashtags / `n` (capped at 1) |
//! | mean_sentiment | mean over events carrying a sentiment, else 0 |
//! | sentiment_variance | population variance of those, 0 below two |
//! | burstiness | Goh–Barabási coefficient of inter-event gaps |
//! | entropy | Shannon entropy (bits) of the per-bin counts |
//! | night_activity_fraction | share of events at 00:00–06:00 UTC |
//! | mean_inter_event_gap | mean gap between consecutive events, hours |
//! | activity_span_fraction | active bins / total bins |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{bin_entropy, burstiness};
use crate::ingest::{ActionType, EventRecord, Window};

pub const FEATURE_COUNT: usize = 12;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "posting_rate",
    "retweet_ratio",
    "reply_ratio",
    "mention_ratio",
    "distinct_hashtag_rate",
    "mean_sentiment",
    "sentiment_variance",
    "burstiness",
    "entropy",
    "night_activity_fraction",
    "mean_inter_event_gap",
    "activity_span_fraction",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub user_id: String,
    pub values: Vec<f64>,
    /// Set when the user had no events in the window; values are all zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }
}

const NIGHT_END: i64 = 6 * 3600;

pub fn extract_features(user_id: &str, events: &[EventRecord], window: Window, bin_width: i64) -> FeatureVector {
    let mut ts: Vec<i64> = Vec::new();
    let mut counts = [0usize; 5];
    let mut tags: BTreeSet<&str> = BTreeSet::new();
    let mut sentiments = Vec::new();
    let bins = window.bin_count(bin_width).max(1);
    let mut per_bin = vec![0.0; bins];
    for e in events.iter().filter(|e| window.contains(e.timestamp)) {
        ts.push(e.timestamp);
        counts[e.action_type as usize] += 1;
        tags.extend(e.hashtags.iter().map(String::as_str));
        if let Some(s) = e.sentiment {
            sentiments.push(s);
        }
        per_bin[((e.timestamp - window.start) / bin_width) as usize] += 1.0;
    }
    let n = ts.len();
    if n == 0 {
        return FeatureVector {
            user_id: user_id.to_string(),
            values: vec![0.0; FEATURE_COUNT],
            empty: true,
        };
    }
    ts.sort_unstable();
    let nf = n as f64;
    let hours = window.span() as f64 / 3600.0;
    let ratio = |a: ActionType| counts[a as usize] as f64 / nf;
    let (mean_sent, var_sent) = if sentiments.is_empty() {
        (0.0, 0.0)
    } else {
        let m = sentiments.iter().sum::<f64>() / sentiments.len() as f64;
        let v = if sentiments.len() < 2 {
            0.0
        } else {
            sentiments.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / sentiments.len() as f64
        };
        (m, v)
    };
    let night = ts.iter().filter(|&&t| t.rem_euclid(86_400) < NIGHT_END).count() as f64 / nf;
    let mean_gap = if n < 2 {
        0.0
    } else {
        (ts[n - 1] - ts[0]) as f64 / (n - 1) as f64 / 3600.0
    };
    let active_bins = per_bin.iter().filter(|&&c| c > 0.0).count() as f64;
    let values = vec![
        nf / hours,
        ratio(ActionType::Retweet),
        ratio(ActionType::Reply),
        ratio(ActionType::Mention),
        (tags.len() as f64 / nf).min(1.0),
        mean_sent,
        var_sent,
        burstiness(&ts),
        bin_entropy(&per_bin),
        night,
        mean_gap,
        active_bins / bins as f64,
    ];
    let values = values.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect();
    FeatureVector {
        user_id: user_id.to_string(),
        values,
        empty: false,
    }
}

/// Feature vectors for every user with events, sorted by user id.
pub fn extract_all(events: &[EventRecord], window: Window, bin_width: i64) -> Vec<FeatureVector> {
    let mut by_user: BTreeMap<&str, Vec<EventRecord>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id.as_str()).or_default().push(e.clone());
    }
    by_user
        .into_iter()
        .map(|(u, es)| extract_features(u, &es, window, bin_width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(ts: i64, a: ActionType) -> EventRecord {
        EventRecord {
            user_id: "u".into(),
            timestamp: ts,
            action_type: a,
            hashtags: vec![],
            sentiment: None,
            target_user: None,
        }
    }

    #[test]
    fn retweet_ratio_counts() {
        let w = Window::new(0, 86_400).unwrap();
        let mut es: Vec<_> = (0..10).map(|i| ev(1000 + i * 60, ActionType::Post)).collect();
        es.extend((0..5).map(|i| ev(5000 + i * 60, ActionType::Retweet)));
        let f = extract_features("u", &es, w, 300);
        assert!((f.get("retweet_ratio").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(!f.empty);
    }

    #[test]
    fn single_bin_user() {
        let w = Window::new(0, 3000).unwrap();
        let es: Vec<_> = (0..4).map(|i| ev(10 + i, ActionType::Post)).collect();
        let f = extract_features("u", &es, w, 300);
        assert_eq!(f.get("entropy").unwrap(), 0.0);
        assert_eq!(f.get("activity_span_fraction").unwrap(), 0.1);
    }

    #[test]
    fn no_events_gives_flagged_zero_vector() {
        let w = Window::new(0, 3000).unwrap();
        let f = extract_features("u", &[ev(5000, ActionType::Post)], w, 300);
        assert!(f.empty);
        assert_eq!(f.values, vec![0.0; FEATURE_COUNT]);
    }

    /// Independent recount for a random user, written without the shared helpers.
    #[test]
    fn random_user_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let actions = [ActionType::Post, ActionType::Retweet, ActionType::Mention, ActionType::Reply, ActionType::Other];
        let w = Window::new(86_400, 3 * 86_400).unwrap();
        let mut es = Vec::new();
        for _ in 0..200 {
            let mut e = ev(rng.random_range(80_000..270_000), actions[rng.random_range(0..5)]);
            if rng.random_bool(0.5) {
                e.sentiment = Some(rng.random_range(-1.0..1.0));
            }
            for _ in 0..rng.random_range(0..3) {
                e.hashtags.push(format!("h{}", rng.random_range(0..40)));
            }
            es.push(e);
        }
        let f = extract_features("u", &es, w, 300);

        let inside: Vec<&EventRecord> = es.iter().filter(|e| e.timestamp >= 86_400 && e.timestamp < 3 * 86_400).collect();
        let n = inside.len() as f64;
        let count = |a| inside.iter().filter(|e| e.action_type == a).count() as f64;
        let mut tags = std::collections::HashSet::new();
        for e in &inside {
            for h in &e.hashtags {
                tags.insert(h.clone());
            }
        }
        let s: Vec<f64> = inside.iter().filter_map(|e| e.sentiment).collect();
        let sm = s.iter().sum::<f64>() / s.len() as f64;
        let sv = s.iter().map(|x| (x - sm).powi(2)).sum::<f64>() / s.len() as f64;
        let mut t: Vec<i64> = inside.iter().map(|e| e.timestamp).collect();
        t.sort();
        let gaps: Vec<f64> = t.windows(2).map(|p| (p[1] - p[0]) as f64).collect();
        let gm = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let gs = (gaps.iter().map(|g| (g - gm).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
        let mut hist = vec![0.0f64; 576];
        for &x in &t {
            hist[((x - 86_400) / 300) as usize] += 1.0;
        }
        let ent: f64 = hist.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).log2()).sum();
        let night = t.iter().filter(|&&x| (x % 86_400) < 21_600).count() as f64 / n;
        let expect = [
            n / 48.0,
            count(ActionType::Retweet) / n,
            count(ActionType::Reply) / n,
            count(ActionType::Mention) / n,
            (tags.len() as f64 / n).min(1.0),
            sm,
            sv,
            (gs - gm) / (gs + gm),
            ent,
            night,
            gm / 3600.0,
            hist.iter().filter(|&&c| c > 0.0).count() as f64 / 576.0,
        ];
        for (i, (a, b)) in f.values.iter().zip(expect).enumerate() {
            assert!((a - b).abs() < 1e-9, "{}: {a} vs {b}", FEATURE_NAMES[i]);
        }
    }
}
