//! Long-term memory of embedding-parameter performance per context bucket.
//!
//! Precision is tracked per `(bucket, E, τ)` as a running ratio of correct
//! to total decisions; usage is tracked per `(E, τ)` across all buckets.
//! Selection scores every candidate as
//! `α·precision + (1 − α)·exp(−β·usage)` and takes the argmax, breaking
//! ties towards the smaller `E`, then the smaller `τ`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::journal::{self, io_err, Journal, StoreError};

/// An `(E, τ)` candidate.
pub type ParamPair = (usize, usize);

pub const DEFAULT_DIMS: [usize; 6] = [2, 3, 4, 5, 6, 8];
pub const DEFAULT_DELAYS: [usize; 4] = [1, 2, 4, 8];

const SNAPSHOT_FILE: &str = "params.snapshot";
const JOURNAL_FILE: &str = "params.journal.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub embedding_dim: usize,
    pub delay: usize,
    pub bucket_key: String,
    pub precision_hist: f64,
    pub usage_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionPolicy {
    pub alpha: f64,
    pub beta: f64,
    pub candidate_grid: Vec<ParamPair>,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        let candidate_grid = DEFAULT_DIMS
            .iter()
            .flat_map(|&e| DEFAULT_DELAYS.iter().map(move |&t| (e, t)))
            .collect();
        SelectionPolicy {
            alpha: 0.8,
            beta: 0.1,
            candidate_grid,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(format!("beta {} must be positive", self.beta));
        }
        if self.candidate_grid.is_empty() {
            return Err("candidate grid is empty".into());
        }
        if let Some(&(e, t)) = self.candidate_grid.iter().find(|&&(e, t)| e < 2 || t < 1) {
            return Err(format!("grid pair ({e}, {t}) needs E >= 2 and tau >= 1"));
        }
        Ok(())
    }

    pub fn max_dim(&self) -> usize {
        self.candidate_grid.iter().map(|p| p.0).max().unwrap_or(0)
    }

    pub fn max_delay(&self) -> usize {
        self.candidate_grid.iter().map(|p| p.1).max().unwrap_or(0)
    }

    pub fn score(&self, precision: f64, usage: u64) -> f64 {
        self.alpha * precision + (1.0 - self.alpha) * (-self.beta * usage as f64).exp()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Tally {
    correct: u64,
    total: u64,
}

impl Tally {
    fn precision(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// In-memory state of the store; this is what snapshots serialize.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    precision: BTreeMap<String, BTreeMap<String, Tally>>,
    usage: BTreeMap<String, u64>,
}

fn pair_key((e, t): ParamPair) -> String {
    format!("{e}/{t}")
}

fn parse_pair_key(k: &str) -> Option<ParamPair> {
    let (e, t) = k.split_once('/')?;
    Some((e.parse().ok()?, t.parse().ok()?))
}

impl ParamState {
    pub fn precision_hist(&self, bucket: &str, pair: ParamPair) -> f64 {
        self.precision
            .get(bucket)
            .and_then(|m| m.get(&pair_key(pair)))
            .map(Tally::precision)
            .unwrap_or(0.0)
    }

    pub fn usage_count(&self, pair: ParamPair) -> u64 {
        self.usage.get(&pair_key(pair)).copied().unwrap_or(0)
    }

    fn apply(&mut self, bucket: &str, pair: ParamPair, correct: u64, total: u64) {
        let tally = self
            .precision
            .entry(bucket.to_string())
            .or_default()
            .entry(pair_key(pair))
            .or_default();
        tally.correct += correct;
        tally.total += total;
        *self.usage.entry(pair_key(pair)).or_default() += 1;
    }

    /// Sets a record directly; used to seed stores in tests and tools.
    pub fn set(&mut self, bucket: &str, pair: ParamPair, correct: u64, total: u64, usage: u64) {
        self.precision
            .entry(bucket.to_string())
            .or_default()
            .insert(pair_key(pair), Tally { correct, total });
        self.usage.insert(pair_key(pair), usage);
    }

    pub fn records(&self) -> Vec<ParamRecord> {
        let mut out = Vec::new();
        for (bucket, pairs) in &self.precision {
            for (k, tally) in pairs {
                let Some(pair) = parse_pair_key(k) else { continue };
                out.push(ParamRecord {
                    embedding_dim: pair.0,
                    delay: pair.1,
                    bucket_key: bucket.clone(),
                    precision_hist: tally.precision(),
                    usage_count: self.usage_count(pair),
                });
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.precision.is_empty() && self.usage.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    bucket: String,
    #[serde(rename = "E")]
    dim: usize,
    tau: usize,
    correct: u64,
    total: u64,
    ts: u64,
}

/// Shareable handle. Reads take a shared lock; updates are serialized
/// through the journal writer and then applied in memory.
#[derive(Debug, Default)]
pub struct ParamStore {
    state: RwLock<ParamState>,
    writer: Option<Mutex<Journal>>,
    dir: Option<PathBuf>,
}

impl ParamStore {
    /// A store that lives only in memory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn from_state(state: ParamState) -> Self {
        ParamStore {
            state: RwLock::new(state),
            ..Default::default()
        }
    }

    /// Opens (or creates) a durable store in `dir`: snapshot then journal replay.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let snap = dir.join(SNAPSHOT_FILE);
        let mut state = if snap.exists() {
            journal::read_snapshot(&snap)?
        } else {
            ParamState::default()
        };
        let journal_path = dir.join(JOURNAL_FILE);
        for e in journal::replay::<JournalEntry>(&journal_path)? {
            state.apply(&e.bucket, (e.dim, e.tau), e.correct, e.total);
        }
        Ok(ParamStore {
            state: RwLock::new(state),
            writer: Some(Mutex::new(Journal::open(&journal_path)?)),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn state(&self) -> ParamState {
        self.state.read().expect("param state lock").clone()
    }

    pub fn precision_hist(&self, bucket: &str, pair: ParamPair) -> f64 {
        self.state.read().expect("param state lock").precision_hist(bucket, pair)
    }

    pub fn usage_count(&self, pair: ParamPair) -> u64 {
        self.state.read().expect("param state lock").usage_count(pair)
    }

    pub fn records(&self) -> Vec<ParamRecord> {
        self.state.read().expect("param state lock").records()
    }

    /// Folds `correct / total` into the running precision of `(bucket, pair)`
    /// and bumps the pair's usage count.
    pub fn update_precision(
        &self,
        bucket: &str,
        pair: ParamPair,
        correct: u64,
        total: u64,
    ) -> Result<(), StoreError> {
        assert!(correct <= total, "correct {correct} exceeds total {total}");
        if let Some(w) = &self.writer {
            let mut w = w.lock().expect("journal lock");
            w.append(&JournalEntry {
                bucket: bucket.to_string(),
                dim: pair.0,
                tau: pair.1,
                correct,
                total,
                ts: journal::now_ts(),
            })?;
            // apply while still holding the writer so journal order == apply order
            self.state
                .write()
                .expect("param state lock")
                .apply(bucket, pair, correct, total);
        } else {
            self.state
                .write()
                .expect("param state lock")
                .apply(bucket, pair, correct, total);
        }
        Ok(())
    }

    /// Writes a snapshot into the store directory and empties the journal.
    pub fn compact(&self) -> Result<(), StoreError> {
        let (Some(dir), Some(w)) = (&self.dir, &self.writer) else {
            return Ok(());
        };
        let mut w = w.lock().expect("journal lock");
        let state = self.state();
        journal::write_snapshot(&dir.join(SNAPSHOT_FILE), &state)?;
        w.truncate()
    }
}

pub fn snapshot(store: &ParamStore, path: &Path) -> Result<(), StoreError> {
    journal::write_snapshot(path, &store.state())
}

pub fn load_snapshot(path: &Path) -> Result<ParamStore, StoreError> {
    Ok(ParamStore::from_state(journal::read_snapshot(path)?))
}

/// Argmax of the exploitation/exploration score over the candidate grid.
pub fn select_params(bucket: &str, policy: &SelectionPolicy, store: &ParamStore) -> ParamPair {
    let state = store.state.read().expect("param state lock");
    select_from_state(bucket, policy, &state)
}

pub fn select_from_state(bucket: &str, policy: &SelectionPolicy, state: &ParamState) -> ParamPair {
    let mut grid = policy.candidate_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let mut best = grid[0];
    let mut best_score = f64::NEG_INFINITY;
    for pair in grid {
        let s = policy.score(state.precision_hist(bucket, pair), state.usage_count(pair));
        if s > best_score {
            best = pair;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_has_24_pairs() {
        let p = SelectionPolicy::default();
        assert_eq!(p.candidate_grid.len(), 24);
        p.validate().unwrap();
        assert_eq!((p.max_dim(), p.max_delay()), (8, 8));
    }

    #[test]
    fn policy_validation() {
        let mut p = SelectionPolicy::default();
        p.alpha = 1.5;
        assert!(p.validate().is_err());
        let mut p = SelectionPolicy::default();
        p.beta = 0.0;
        assert!(p.validate().is_err());
        let mut p = SelectionPolicy::default();
        p.candidate_grid.push((1, 1));
        assert!(p.validate().is_err());
    }

    #[test]
    fn fresh_store_picks_smallest_pair() {
        let store = ParamStore::in_memory();
        let p = SelectionPolicy::default();
        assert!((p.score(0.0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(select_params("b", &p, &store), (2, 1));
    }

    #[test]
    fn perfect_record_wins() {
        let mut st = ParamState::default();
        st.set("b", (3, 2), 1, 1, 0);
        let p = SelectionPolicy::default();
        assert!((p.score(1.0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(select_from_state("b", &p, &st), (3, 2));
        // another bucket has no history for (3,2) and usage is 0 everywhere
        assert_eq!(select_from_state("other", &p, &st), (2, 1));
    }

    #[test]
    fn half_precision_heavy_usage_still_wins() {
        let mut st = ParamState::default();
        st.set("b", (3, 2), 1, 2, 50);
        st.set("b", (4, 1), 0, 0, 0);
        let p = SelectionPolicy::default();
        let s = p.score(0.5, 50);
        assert!((s - (0.4 + 0.2 * (-5.0f64).exp())).abs() < 1e-15);
        assert!((s - 0.4013).abs() < 1e-4);
        assert_eq!(select_from_state("b", &p, &st), (3, 2));
    }

    #[test]
    fn running_ratio_updates() {
        let store = ParamStore::in_memory();
        store.update_precision("b", (3, 2), 8, 10).unwrap();
        assert_eq!(store.precision_hist("b", (3, 2)), 0.8);
        assert_eq!(store.usage_count((3, 2)), 1);
        store.update_precision("b", (3, 2), 0, 10).unwrap();
        assert_eq!(store.precision_hist("b", (3, 2)), 0.4);
        assert_eq!(store.usage_count((3, 2)), 2);
        store.update_precision("b", (3, 2), 0, 0).unwrap();
        assert_eq!(store.precision_hist("b", (3, 2)), 0.4);
        assert_eq!(store.usage_count((3, 2)), 3);
    }

    #[test]
    fn usage_is_global_precision_is_per_bucket() {
        let store = ParamStore::in_memory();
        store.update_precision("a", (2, 1), 1, 1).unwrap();
        store.update_precision("b", (2, 1), 0, 1).unwrap();
        assert_eq!(store.usage_count((2, 1)), 2);
        assert_eq!(store.precision_hist("a", (2, 1)), 1.0);
        assert_eq!(store.precision_hist("b", (2, 1)), 0.0);
    }

    #[test]
    fn durable_store_replays_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = ParamStore::open(dir.path()).unwrap();
            s.update_precision("b", (3, 2), 8, 10).unwrap();
            s.update_precision("b", (4, 1), 1, 4).unwrap();
        }
        let s = ParamStore::open(dir.path()).unwrap();
        assert_eq!(s.precision_hist("b", (3, 2)), 0.8);
        s.compact().unwrap();
        s.update_precision("b", (3, 2), 0, 10).unwrap();
        drop(s);
        let s = ParamStore::open(dir.path()).unwrap();
        assert_eq!(s.precision_hist("b", (3, 2)), 0.4);
        assert_eq!(s.precision_hist("b", (4, 1)), 0.25);
        assert_eq!(s.usage_count((3, 2)), 2);
    }

    #[test]
    fn empty_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.snap");
        snapshot(&ParamStore::in_memory(), &p).unwrap();
        assert!(load_snapshot(&p).unwrap().state().is_empty());
    }

    #[test]
    fn truncated_snapshot_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.snap");
        let store = ParamStore::in_memory();
        store.update_precision("b", (2, 1), 3, 4).unwrap();
        snapshot(&store, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_snapshot(&p),
            Err(StoreError::CorruptSnapshot { .. })
        ));
    }

    fn arb_state() -> impl Strategy<Value = ParamState> {
        prop::collection::vec(
            (0u8..4, 2usize..9, 1usize..9, 0u64..50, 0u64..50, 0u64..200),
            0..100,
        )
        .prop_map(|rows| {
            let mut st = ParamState::default();
            for (b, e, t, c, extra, u) in rows {
                st.set(&format!("bucket{b}"), (e, t), c, c + extra, u);
            }
            st
        })
    }

    proptest! {
        #[test]
        fn snapshot_round_trip(st in arb_state()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.snap");
            snapshot(&ParamStore::from_state(st.clone()), &p).unwrap();
            let back = load_snapshot(&p).unwrap();
            prop_assert_eq!(back.state(), st.clone());
            prop_assert_eq!(back.records(), st.records());
        }

        #[test]
        fn precision_stays_in_unit_interval(
            updates in prop::collection::vec((0u64..20, 0u64..20), 1..40)
        ) {
            let store = ParamStore::in_memory();
            for (c, extra) in updates {
                store.update_precision("b", (2, 1), c, c + extra).unwrap();
                let p = store.precision_hist("b", (2, 1));
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn used_pair_score_strictly_decreases(prec in 0.0f64..=1.0, usage in 0u64..300) {
            let p = SelectionPolicy::default();
            prop_assert!(p.score(prec, usage + 1) < p.score(prec, usage));
        }
    }
}
