//! Label store, query selection and pseudo-label harvesting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::uncertainty_of;
use super::{ClassifyError, FeatureVector, TreeEnsemble, UserClass};
use crate::journal::{now_ts, replay, Journal, StoreError};

/// Pseudo-labels need a max vote fraction strictly above this.
pub const PSEUDO_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Human,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Pending,
    Labeled,
    Skipped,
}

/// One line of the label journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub user: String,
    pub label: UserClass,
    pub source: LabelSource,
    pub ts: u64,
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQueueItem {
    pub user_id: String,
    pub features: FeatureVector,
    pub uncertainty: f64,
    pub status: LabelStatus,
    pub assigned_label: Option<UserClass>,
    pub source: Option<LabelSource>,
}

/// Latest label per user, backed by an append-only journal when opened
/// on disk. Human labels are never replaced by pseudo-labels.
#[derive(Debug, Default)]
pub struct LabelStore {
    journal: Option<Journal>,
    current: BTreeMap<String, LabelRecord>,
    revision: u64,
}

impl LabelStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut store = LabelStore::default();
        if path.exists() {
            for rec in replay::<LabelRecord>(path)? {
                store.revision = store.revision.max(rec.revision);
                store.current.insert(rec.user.clone(), rec);
            }
        }
        store.journal = Some(Journal::open(path)?);
        Ok(store)
    }

    pub fn get(&self, user: &str) -> Option<&LabelRecord> {
        self.current.get(user)
    }

    pub fn records(&self) -> impl Iterator<Item = &LabelRecord> {
        self.current.values()
    }

    pub fn count(&self, source: LabelSource) -> usize {
        self.current.values().filter(|r| r.source == source).count()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn write(&mut self, user: &str, label: UserClass, source: LabelSource, model_version: Option<String>) -> Result<LabelRecord, StoreError> {
        let rec = LabelRecord {
            user: user.to_string(),
            label,
            source,
            ts: now_ts(),
            revision: self.revision + 1,
            model_version,
        };
        if let Some(j) = self.journal.as_mut() {
            j.append(&rec)?;
        }
        self.revision += 1;
        self.current.insert(rec.user.clone(), rec.clone());
        Ok(rec)
    }

    /// Records a human label. Re-submitting the current human label is a
    /// no-op; the returned flag says whether anything was written.
    pub fn set_human(&mut self, user: &str, label: UserClass) -> Result<(LabelRecord, bool), StoreError> {
        if let Some(cur) = self.current.get(user) {
            if cur.source == LabelSource::Human && cur.label == label {
                return Ok((cur.clone(), false));
            }
        }
        self.write(user, label, LabelSource::Human, None).map(|r| (r, true))
    }

    /// Records a pseudo-label unless the user has a human label or already
    /// carries a pseudo-label from the same model version.
    pub fn set_pseudo(&mut self, user: &str, label: UserClass, model_version: &str) -> Result<bool, StoreError> {
        match self.current.get(user) {
            Some(cur) if cur.source == LabelSource::Human => return Ok(false),
            Some(cur) if cur.model_version.as_deref() == Some(model_version) => return Ok(false),
            _ => {}
        }
        self.write(user, label, LabelSource::Pseudo, Some(model_version.to_string()))?;
        Ok(true)
    }
}

/// The `n` most uncertain pool items, descending, ties by user id.
pub fn next_queries(model: &TreeEnsemble, pool: &[FeatureVector], n: usize) -> Result<Vec<LabelQueueItem>, ClassifyError> {
    let mut items = Vec::with_capacity(pool.len());
    for fv in pool {
        model.check_width(&fv.values)?;
        items.push(LabelQueueItem {
            user_id: fv.user_id.clone(),
            uncertainty: model.uncertainty(&fv.values),
            features: fv.clone(),
            status: LabelStatus::Pending,
            assigned_label: None,
            source: None,
        });
    }
    items.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty).then_with(|| a.user_id.cmp(&b.user_id)));
    items.truncate(n);
    Ok(items)
}

/// Stores a pseudo-label for every pool item whose max vote fraction
/// exceeds [`PSEUDO_CONFIDENCE`]. Returns how many were written.
pub fn harvest_pseudo_labels(model: &TreeEnsemble, pool: &[FeatureVector], store: &mut LabelStore) -> Result<usize, ClassifyError> {
    let version = model.version();
    let mut added = 0;
    for fv in pool {
        model.check_width(&fv.values)?;
        let p = model.predict_proba(&fv.values);
        let confidence = 1.0 - uncertainty_of(&p);
        if confidence > PSEUDO_CONFIDENCE && store.set_pseudo(&fv.user_id, model.predict(&fv.values), &version)? {
            added += 1;
        }
    }
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train, ForestConfig};
    use crate::synthgen::{gen_blobs, BlobSpec};
    use proptest::prelude::*;

    fn fv(id: &str, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            user_id: id.into(),
            values,
            empty: false,
        }
    }

    /// One feature; x < 0 is Fake, x > 10 is Org. Ten trees, so vote
    /// fractions come in tenths.
    fn simple_model() -> TreeEnsemble {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![if i < 20 { -(i as f64) - 1.0 } else { i as f64 + 10.0 }]).collect();
        let ys: Vec<UserClass> = (0..40).map(|i| if i < 20 { UserClass::Fake } else { UserClass::Org }).collect();
        train(&xs, &ys, &ForestConfig { n_trees: 10, ..ForestConfig::default() }).unwrap().0
    }

    #[test]
    fn queries_sorted_with_ties() {
        let m = simple_model();
        let pool = vec![fv("c", vec![-50.0]), fv("b", vec![-40.0]), fv("a", vec![-30.0])];
        let q = next_queries(&m, &pool, 10).unwrap();
        assert_eq!(q.len(), 3);
        let ids: Vec<_> = q.iter().map(|i| i.user_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(q.iter().all(|i| i.status == LabelStatus::Pending));
        assert_eq!(next_queries(&m, &pool, 2).unwrap().len(), 2);
        assert!(next_queries(&m, &[fv("x", vec![1.0, 2.0])], 1).is_err());
    }

    #[test]
    fn queries_pick_most_uncertain() {
        let (xs, ys) = gen_blobs(&BlobSpec { n: 200, seed: 2, ..BlobSpec::default() });
        let (m, _) = train(&xs, &ys, &ForestConfig::default()).unwrap();
        let pool: Vec<_> = xs.iter().enumerate().map(|(i, x)| fv(&format!("u{i:03}"), x.clone())).collect();
        let q = next_queries(&m, &pool, 5).unwrap();
        let min_selected = q.iter().map(|i| i.uncertainty).fold(f64::INFINITY, f64::min);
        let rest_max = pool
            .iter()
            .filter(|p| !q.iter().any(|i| i.user_id == p.user_id))
            .map(|p| m.uncertainty(&p.values))
            .fold(0.0, f64::max);
        assert!(min_selected >= rest_max);
    }

    #[test]
    fn human_labels_idempotent_and_dominant() {
        let mut s = LabelStore::in_memory();
        let (_, w) = s.set_human("u1", UserClass::Org).unwrap();
        assert!(w);
        let (_, w) = s.set_human("u1", UserClass::Org).unwrap();
        assert!(!w);
        assert_eq!(s.revision(), 1);
        assert!(!s.set_pseudo("u1", UserClass::Fake, "v1").unwrap());
        assert_eq!(s.get("u1").unwrap().label, UserClass::Org);
        assert!(s.set_pseudo("u2", UserClass::Fake, "v1").unwrap());
        assert!(!s.set_pseudo("u2", UserClass::Fake, "v1").unwrap());
        assert!(s.set_pseudo("u2", UserClass::Fake, "v2").unwrap());
        s.set_human("u2", UserClass::Political).unwrap();
        assert_eq!(s.get("u2").unwrap().source, LabelSource::Human);
    }

    #[test]
    fn harvest_threshold_is_strict() {
        let m = simple_model();
        // sweep probes until one lands on exactly 9 of 10 votes
        let mut exact = None;
        let mut sure = None;
        for k in -400..400 {
            let x = k as f64 * 0.05;
            let p = m.predict_proba(&[x]);
            let top = p.iter().copied().fold(0.0, f64::max);
            if top == 0.9 && exact.is_none() {
                exact = Some(x);
            }
            if top == 1.0 && sure.is_none() {
                sure = Some(x);
            }
        }
        let mut s = LabelStore::in_memory();
        if let Some(x) = exact {
            assert_eq!(harvest_pseudo_labels(&m, &[fv("edge", vec![x])], &mut s).unwrap(), 0);
        }
        let x = sure.unwrap();
        s.set_human("h", UserClass::Individual).unwrap();
        let pool = vec![fv("h", vec![x]), fv("p", vec![x])];
        assert_eq!(harvest_pseudo_labels(&m, &pool, &mut s).unwrap(), 1);
        assert_eq!(harvest_pseudo_labels(&m, &pool, &mut s).unwrap(), 0);
        assert_eq!(s.get("h").unwrap().label, UserClass::Individual);
        assert_eq!(s.get("p").unwrap().source, LabelSource::Pseudo);
    }

    #[test]
    fn harvest_matches_truth_on_separable_pool() {
        let spec = BlobSpec { n: 200, separation: 6.0, rotate: false, seed: 8, ..BlobSpec::default() };
        let (xs, ys) = gen_blobs(&spec);
        let (m, _) = train(&xs, &ys, &ForestConfig::default()).unwrap();
        let (px, py) = gen_blobs(&BlobSpec { seed: 9, ..spec });
        let pool: Vec<_> = px.iter().enumerate().map(|(i, x)| fv(&format!("p{i:03}"), x.clone())).collect();
        let mut s = LabelStore::in_memory();
        let n = harvest_pseudo_labels(&m, &pool, &mut s).unwrap();
        assert!(n > 100);
        let truth: BTreeMap<String, UserClass> = pool.iter().zip(&py).map(|(f, &y)| (f.user_id.clone(), y)).collect();
        let agree = s.records().filter(|r| truth[&r.user] == r.label).count();
        assert!(agree as f64 >= 0.95 * n as f64);
    }

    #[test]
    fn journal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        {
            let mut s = LabelStore::open(&path).unwrap();
            s.set_human("a", UserClass::Fake).unwrap();
            s.set_pseudo("b", UserClass::Org, "v").unwrap();
            s.set_human("b", UserClass::Political).unwrap();
        }
        let s = LabelStore::open(&path).unwrap();
        assert_eq!(s.revision(), 3);
        assert_eq!(s.get("b").unwrap().label, UserClass::Political);
        assert_eq!(s.count(LabelSource::Human), 2);
        let line = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(first["label"], "Fake");
        assert_eq!(first["source"], "human");
        assert!(first["ts"].is_u64());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Human(u8, u8),
        Pseudo(u8, u8, u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..4, 0u8..4).prop_map(|(u, l)| Op::Human(u, l)),
            (0u8..4, 0u8..4, 0u8..3).prop_map(|(u, l, v)| Op::Pseudo(u, l, v)),
        ]
    }

    proptest! {
        #[test]
        fn pseudo_never_replaces_human(ops in proptest::collection::vec(op(), 0..40)) {
            let mut s = LabelStore::in_memory();
            let mut human: BTreeMap<u8, UserClass> = BTreeMap::new();
            for o in ops {
                match o {
                    Op::Human(u, l) => {
                        s.set_human(&format!("u{u}"), UserClass::ALL[l as usize]).unwrap();
                        human.insert(u, UserClass::ALL[l as usize]);
                    }
                    Op::Pseudo(u, l, v) => {
                        s.set_pseudo(&format!("u{u}"), UserClass::ALL[l as usize], &format!("v{v}")).unwrap();
                    }
                }
                for (u, l) in &human {
                    let r = s.get(&format!("u{u}")).unwrap();
                    prop_assert_eq!(r.source, LabelSource::Human);
                    prop_assert_eq!(r.label, *l);
                }
            }
        }
    }
}
