//! Historical validation cases and the adaptive significance threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PairCausalFrame;
use crate::ingest::floor_log2;
use crate::journal::{now_ts, replay, Journal, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub sample_size: usize,
    pub treatment_ratio: f64,
    /// Seconds.
    pub temporal_coverage: i64,
    pub profile_key: String,
}

impl DatasetProfile {
    pub fn new(sample_size: usize, treatment_ratio: f64, temporal_coverage: i64) -> Self {
        DatasetProfile {
            sample_size,
            treatment_ratio,
            temporal_coverage,
            profile_key: profile_key(sample_size, treatment_ratio, temporal_coverage),
        }
    }

    pub fn of_frame(frame: &PairCausalFrame, bin_width: i64) -> Self {
        Self::new(frame.len(), frame.treatment_ratio(), frame.len() as i64 * bin_width)
    }
}

/// `n{⌊log2 n⌋}-r{⌊log2(1+100·ratio)⌋}-s{⌊log2(hours+1)⌋}`.
pub fn profile_key(sample_size: usize, treatment_ratio: f64, coverage_seconds: i64) -> String {
    let n = floor_log2(sample_size.max(1) as f64);
    let r = floor_log2(1.0 + 100.0 * treatment_ratio.clamp(0.0, 1.0));
    let s = floor_log2(coverage_seconds.max(0) as f64 / 3600.0 + 1.0);
    format!("n{n}-r{r}-s{s}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    CausalCase,
}

/// One estimator's outcome in one validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalCase {
    pub kind: CaseKind,
    pub profile_key: String,
    pub estimator_name: String,
    /// 1 when the estimator's own call agreed with the final verdict.
    pub precision: f64,
    /// The estimator alone found the effect significant.
    pub significant: bool,
    /// Final verdict for the pair.
    pub validated: bool,
    pub timestamp: u64,
}

impl CausalCase {
    pub fn new(profile_key: &str, estimator: &str, significant: bool, validated: bool) -> Self {
        CausalCase {
            kind: CaseKind::CausalCase,
            profile_key: profile_key.to_string(),
            estimator_name: estimator.to_string(),
            precision: if significant == validated { 1.0 } else { 0.0 },
            significant,
            validated,
            timestamp: now_ts(),
        }
    }
}

#[derive(Debug, Default)]
pub struct HistoryStore {
    journal: Option<Journal>,
    cases: Vec<CausalCase>,
}

impl HistoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let cases = if path.exists() { replay(path)? } else { Vec::new() };
        Ok(HistoryStore {
            journal: Some(Journal::open(path)?),
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn append(&mut self, case: CausalCase) -> Result<(), StoreError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&case)?;
        }
        self.cases.push(case);
        Ok(())
    }

    pub fn cases_for<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a CausalCase> + 'a {
        self.cases.iter().filter(move |c| c.profile_key == key)
    }

    /// Mean precision of the cases under `key`; 0 without history.
    pub fn success_rate(&self, key: &str) -> f64 {
        let (sum, n) = self.cases_for(key).fold((0.0, 0usize), |(s, n), c| (s + c.precision, n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).clamp(0.0, 1.0)
        }
    }

    /// Historical precision of `estimator` under `key`, if it has cases.
    pub fn precision(&self, key: &str, estimator: &str) -> Option<f64> {
        let ps: Vec<f64> = self
            .cases_for(key)
            .filter(|c| c.estimator_name == estimator)
            .map(|c| c.precision)
            .collect();
        (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64)
    }

    /// Share of validated cases under `key` the estimator flagged as
    /// significant, if any validated cases exist.
    pub fn recall(&self, key: &str, estimator: &str) -> Option<f64> {
        let v: Vec<bool> = self
            .cases_for(key)
            .filter(|c| c.estimator_name == estimator && c.validated)
            .map(|c| c.significant)
            .collect();
        (!v.is_empty()).then(|| v.iter().filter(|&&s| s).count() as f64 / v.len() as f64)
    }
}

/// `θ_base · exp(±γ · success_rate)`; the sign is `+` unless inverted.
pub fn adaptive_threshold(theta_base: f64, success_rate: f64, gamma: f64, invert: bool) -> f64 {
    let sign = if invert { -1.0 } else { 1.0 };
    theta_base * (sign * gamma * success_rate.clamp(0.0, 1.0)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_spot_values() {
        assert_eq!(adaptive_threshold(0.05, 0.0, 0.2, false), 0.05);
        // 30-digit reference evaluations
        assert!((adaptive_threshold(0.05, 1.0, 0.2, false) - 0.0610701379080085).abs() < 1e-15);
        assert!((adaptive_threshold(0.05, 0.6, 0.2, false) - 0.0563748425789688).abs() < 1e-15);
        assert!(adaptive_threshold(0.05, 1.0, 0.2, true) < 0.05);
    }

    #[test]
    fn success_rate_from_history() {
        let mut h = HistoryStore::in_memory();
        assert_eq!(h.success_rate("k"), 0.0);
        let mut a = CausalCase::new("k", "diff_in_means", true, true);
        a.precision = 0.4;
        let mut b = CausalCase::new("k", "diff_in_means", true, true);
        b.precision = 0.8;
        h.append(a).unwrap();
        h.append(b).unwrap();
        h.append(CausalCase::new("other", "diff_in_means", true, false)).unwrap();
        assert!((h.success_rate("k") - 0.6).abs() < 1e-15);
        assert!((adaptive_threshold(0.05, h.success_rate("k"), 0.2, false) - 0.0563748425789688).abs() < 1e-15);
    }

    #[test]
    fn precision_and_recall() {
        let mut h = HistoryStore::in_memory();
        h.append(CausalCase::new("k", "e", true, true)).unwrap();
        h.append(CausalCase::new("k", "e", false, true)).unwrap();
        h.append(CausalCase::new("k", "e", false, false)).unwrap();
        assert!((h.precision("k", "e").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(h.recall("k", "e"), Some(0.5));
        assert_eq!(h.precision("k", "x"), None);
        assert_eq!(h.recall("z", "e"), None);
    }

    #[test]
    fn journal_tagged_and_replayed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.jsonl");
        {
            let mut h = HistoryStore::open(&p).unwrap();
            h.append(CausalCase::new("k", "e", true, true)).unwrap();
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"kind\":\"causal_case\""));
        assert_eq!(HistoryStore::open(&p).unwrap().len(), 1);
    }

    #[test]
    fn profile_keys() {
        assert_eq!(profile_key(285, 0.35, 86_400), "n8-r5-s4");
        assert_eq!(profile_key(0, 0.0, 0), "n0-r0-s0");
    }

    proptest! {
        #[test]
        fn threshold_monotone(base in 1e-4f64..0.5, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(adaptive_threshold(base, a, 0.2, false) < adaptive_threshold(base, b, 0.2, false));
            prop_assert!(adaptive_threshold(base, 0.0, 0.2, false) == base);
        }
    }
}
