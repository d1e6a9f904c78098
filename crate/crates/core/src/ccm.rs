//! Convergent cross mapping between user activity series.
//!
//! For a pair `(u1, u2)` the values of `u1` are predicted from the shadow
//! manifold of `u2`: the `k` nearest library neighbours of `u2`'s point at
//! time `t` (distances `d_1 ≤ … ≤ d_k`) vote with weights
//! `exp(−d_j/d_1)`, normalized to sum to one, on `X_{u1}(t_j)`. The skill at
//! library length `L` is the Pearson correlation between observed and
//! predicted values; the influence score is the best skill over the
//! library grid.
//!
//! Neighbour weights depend only on the source manifold, so they are
//! computed once per `(source, L)` and shared by every target.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, DelayEmbedding, EmbedError, Neighbor, NeighborIndex};
use crate::ingest::ActivitySeries;

#[derive(Debug, Error, PartialEq)]
pub enum CcmError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("series too short: {points} embedded points, library needs {required}")]
    SeriesTooShort { points: usize, required: usize },
    #[error("library of {library} points cannot supply {k} neighbours (exclusion radius {radius})")]
    LibraryTooSmall {
        library: usize,
        k: usize,
        radius: usize,
    },
    #[error("invalid cross-map config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Pearson correlation with an explicit flag for zero-variance input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub degenerate: bool,
}

/// Single-pass (co-moment update) Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation, CcmError> {
    if a.len() != b.len() {
        return Err(CcmError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(CcmError::TooFewObservations(a.len()));
    }
    let (mut mean_a, mut mean_b) = (0.0, 0.0);
    let (mut m2a, mut m2b, mut cab) = (0.0, 0.0, 0.0);
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mean_a;
        mean_a += dx / n;
        let dy = y - mean_b;
        mean_b += dy / n;
        m2a += dx * (x - mean_a);
        m2b += dy * (y - mean_b);
        cab += dx * (y - mean_b);
    }
    if m2a <= 0.0 || m2b <= 0.0 {
        return Ok(Correlation {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        rho: (cab / (m2a.sqrt() * m2b.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossMapConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub l_step: usize,
    /// Neighbours per prediction; `None` means `E + 1`.
    pub k_neighbors: Option<usize>,
    /// Temporal exclusion radius; `None` means `τ`.
    pub exclusion_radius: Option<usize>,
}

impl Default for CrossMapConfig {
    fn default() -> Self {
        CrossMapConfig {
            l_min: 10,
            l_max: 50,
            l_step: 10,
            k_neighbors: None,
            exclusion_radius: None,
        }
    }
}

impl CrossMapConfig {
    pub fn validate(&self) -> Result<(), CcmError> {
        if self.l_min < 10 || self.l_max < self.l_min {
            return Err(CcmError::InvalidConfig(format!(
                "need 10 <= l_min <= l_max, got [{}, {}]",
                self.l_min, self.l_max
            )));
        }
        if self.l_step == 0 {
            return Err(CcmError::InvalidConfig("l_step must be >= 1".into()));
        }
        if self.k_neighbors == Some(0) {
            return Err(CcmError::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn library_lengths(&self) -> Vec<usize> {
        (self.l_min..=self.l_max).step_by(self.l_step).collect()
    }

    pub fn k_for(&self, dim: usize) -> usize {
        self.k_neighbors.unwrap_or(dim + 1)
    }

    pub fn radius_for(&self, delay: usize) -> usize {
        self.exclusion_radius.unwrap_or(delay)
    }

    /// Smallest library that keeps `k` neighbours eligible for every query.
    pub fn min_library(&self, dim: usize, delay: usize) -> usize {
        let k = self.k_for(dim);
        let r = self.radius_for(delay);
        k + (2 * r).saturating_sub(1).max(1)
    }
}

/// Normalized cross-map weights for one neighbour set. A zero nearest
/// distance collapses the weight onto the zero-distance neighbours.
pub fn neighbor_weights(neighbors: &[Neighbor]) -> Vec<f64> {
    let d1 = neighbors[0].distance;
    if d1 == 0.0 {
        let zeros = neighbors.iter().filter(|n| n.distance == 0.0).count() as f64;
        return neighbors
            .iter()
            .map(|n| if n.distance == 0.0 { 1.0 / zeros } else { 0.0 })
            .collect();
    }
    let raw: Vec<f64> = neighbors.iter().map(|n| (-n.distance / d1).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|u| u / total).collect()
}

/// Neighbour times and weights for every prediction point of one source
/// manifold at one library length.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    k: usize,
    pred_times: Vec<usize>,
    neighbor_times: Vec<usize>,
    weights: Vec<f64>,
}

impl NeighborTable {
    pub fn build(source: &DelayEmbedding, library: &NeighborIndex, k: usize) -> Result<Self, CcmError> {
        let n = source.len();
        let mut table = NeighborTable {
            k,
            pred_times: Vec::with_capacity(n),
            neighbor_times: Vec::with_capacity(n * k),
            weights: Vec::with_capacity(n * k),
        };
        for (t, v) in source.points() {
            let neigh = library.query(v, k, Some(t))?;
            table.pred_times.push(t);
            table.neighbor_times.extend(neigh.iter().map(|x| x.time));
            table.weights.extend(neighbor_weights(&neigh));
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.pred_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_times.is_empty()
    }

    pub fn prediction_times(&self) -> &[usize] {
        &self.pred_times
    }

    /// Weighted predictions of `target` at each prediction time.
    pub fn predict(&self, target: &[f64]) -> Vec<f64> {
        self.neighbor_times
            .chunks_exact(self.k)
            .zip(self.weights.chunks_exact(self.k))
            .map(|(ts, ws)| ts.iter().zip(ws).map(|(&t, &w)| w * target[t]).sum())
            .collect()
    }

    /// Skill of predicting `target` from this table.
    pub fn skill(&self, target: &[f64]) -> Result<Correlation, CcmError> {
        let predicted = self.predict(target);
        let observed: Vec<f64> = self.pred_times.iter().map(|&t| target[t]).collect();
        pearson(&observed, &predicted)
    }
}

/// Predicts `target` at each point of `source` from the library index.
pub fn cross_map_predict(
    target: &ActivitySeries,
    source: &DelayEmbedding,
    library: &NeighborIndex,
    k: usize,
) -> Result<Vec<(usize, f64)>, CcmError> {
    if library.len() < k + 1 {
        return Err(CcmError::LibraryTooSmall {
            library: library.len(),
            k,
            radius: library.excluded_radius,
        });
    }
    let needed = source.time_of(source.len().saturating_sub(1)) + 1;
    if target.len() < needed {
        return Err(CcmError::LengthMismatch(target.len(), needed));
    }
    let table = NeighborTable::build(source, library, k)?;
    Ok(table
        .prediction_times()
        .iter()
        .copied()
        .zip(table.predict(&target.values))
        .collect())
}

/// Directed cross-map result: how well `source`'s manifold recovers `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEdge {
    pub source: String,
    pub target: String,
    pub score: f64,
    pub curve: Vec<(usize, f64)>,
    #[serde(rename = "E")]
    pub dim: usize,
    pub tau: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn edge_from_curve(
    source: &str,
    target: &str,
    lengths: &[usize],
    skills: &[Correlation],
    dim: usize,
    tau: usize,
) -> InfluenceEdge {
    let degenerate = skills.iter().all(|c| c.degenerate);
    let score = if degenerate {
        0.0
    } else {
        skills
            .iter()
            .filter(|c| !c.degenerate)
            .map(|c| c.rho)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    InfluenceEdge {
        source: source.to_string(),
        target: target.to_string(),
        score,
        curve: lengths.iter().copied().zip(skills.iter().map(|c| c.rho)).collect(),
        dim,
        tau,
        degenerate,
    }
}

fn feasible_lengths(
    config: &CrossMapConfig,
    points: usize,
    dim: usize,
    delay: usize,
) -> Result<Vec<usize>, CcmError> {
    config.validate()?;
    if points < config.l_max {
        return Err(CcmError::SeriesTooShort {
            points,
            required: config.l_max,
        });
    }
    let min_lib = config.min_library(dim, delay);
    let lengths: Vec<usize> = config
        .library_lengths()
        .into_iter()
        .filter(|&l| l >= min_lib)
        .collect();
    if lengths.is_empty() {
        return Err(CcmError::LibraryTooSmall {
            library: config.l_max,
            k: config.k_for(dim),
            radius: config.radius_for(delay),
        });
    }
    Ok(lengths)
}

/// Cross-map skill of recovering `target` (u1) from `source`'s (u2)
/// manifold, maximized over library lengths. Both series share one grid.
pub fn influence(
    target: &ActivitySeries,
    source: &ActivitySeries,
    dim: usize,
    delay: usize,
    config: &CrossMapConfig,
) -> Result<InfluenceEdge, CcmError> {
    if target.len() != source.len() {
        return Err(CcmError::LengthMismatch(target.len(), source.len()));
    }
    let manifold = embed::embed_series(source, dim, delay)?;
    let lengths = feasible_lengths(config, manifold.len(), dim, delay)?;
    let k = config.k_for(dim);
    let radius = config.radius_for(delay);
    let mut skills = Vec::with_capacity(lengths.len());
    for &l in &lengths {
        let index = embed::build_index(&manifold.prefix(l), radius);
        let table = NeighborTable::build(&manifold, &index, k)?;
        skills.push(table.skill(&target.values)?);
    }
    Ok(edge_from_curve(
        &source.user_id,
        &target.user_id,
        &lengths,
        &skills,
        dim,
        delay,
    ))
}

/// Per-run cross-mapping engine over a fixed user set and `(E, τ)`.
///
/// Holds the short-term caches: neighbour tables per `(source, L)` and
/// skill curves per ordered pair. Safe to share across threads.
pub struct CcmEngine {
    users: Vec<String>,
    lookup: HashMap<String, usize>,
    series: Vec<Vec<f64>>,
    manifolds: Vec<DelayEmbedding>,
    dim: usize,
    delay: usize,
    config: CrossMapConfig,
    lengths: Vec<usize>,
    tables: DashMap<(usize, usize), Arc<NeighborTable>>,
    results: Option<DashMap<(u32, u32), Arc<[Correlation]>>>,
    knn_queries: AtomicU64,
}

impl std::fmt::Debug for CcmEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CcmEngine")
            .field("users", &self.users.len())
            .field("dim", &self.dim)
            .field("delay", &self.delay)
            .field("lengths", &self.lengths)
            .finish()
    }
}

impl CcmEngine {
    /// `manifolds[i]` must be the embedding of `series[i]` with `(dim, delay)`.
    pub fn new(
        series: Vec<ActivitySeries>,
        manifolds: Vec<DelayEmbedding>,
        dim: usize,
        delay: usize,
        config: CrossMapConfig,
    ) -> Result<Self, CcmError> {
        assert_eq!(series.len(), manifolds.len(), "one manifold per series");
        let len = series.first().map(|s| s.len()).unwrap_or(0);
        if let Some(s) = series.iter().find(|s| s.len() != len) {
            return Err(CcmError::LengthMismatch(s.len(), len));
        }
        let points = manifolds.first().map(|m| m.len()).unwrap_or(config.l_max);
        let lengths = feasible_lengths(&config, points, dim, delay)?;
        let users: Vec<String> = series.iter().map(|s| s.user_id.clone()).collect();
        let lookup = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Ok(CcmEngine {
            users,
            lookup,
            series: series.into_iter().map(|s| s.values).collect(),
            manifolds,
            dim,
            delay,
            config,
            lengths,
            tables: DashMap::new(),
            results: Some(DashMap::new()),
            knn_queries: AtomicU64::new(0),
        })
    }

    /// Embeds each series itself with the batch embedder.
    pub fn from_series(
        series: Vec<ActivitySeries>,
        dim: usize,
        delay: usize,
        config: CrossMapConfig,
    ) -> Result<Self, CcmError> {
        let manifolds = series
            .iter()
            .map(|s| embed::embed_series(s, dim, delay))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(series, manifolds, dim, delay, config)
    }

    /// Turns off the per-pair result cache (neighbour tables stay cached).
    pub fn without_result_cache(mut self) -> Self {
        self.results = None;
        self
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn index_of(&self, user: &str) -> Option<usize> {
        self.lookup.get(user).copied()
    }

    pub fn params(&self) -> (usize, usize) {
        (self.dim, self.delay)
    }

    pub fn library_lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Total nearest-neighbour queries issued so far.
    pub fn knn_queries(&self) -> u64 {
        self.knn_queries.load(Ordering::Relaxed)
    }

    fn table(&self, source: usize, l: usize) -> Result<Arc<NeighborTable>, CcmError> {
        if let Some(t) = self.tables.get(&(source, l)) {
            return Ok(Arc::clone(&t));
        }
        let manifold = &self.manifolds[source];
        let index = embed::build_index(&manifold.prefix(l), self.config.radius_for(self.delay));
        let table = Arc::new(NeighborTable::build(manifold, &index, self.config.k_for(self.dim))?);
        self.knn_queries.fetch_add(table.len() as u64, Ordering::Relaxed);
        Ok(Arc::clone(
            self.tables.entry((source, l)).or_insert(table).value(),
        ))
    }

    fn skills(&self, target: usize, source: usize) -> Result<Arc<[Correlation]>, CcmError> {
        let key = (source as u32, target as u32);
        if let Some(cache) = &self.results {
            if let Some(hit) = cache.get(&key) {
                return Ok(Arc::clone(&hit));
            }
        }
        let mut skills = Vec::with_capacity(self.lengths.len());
        for &l in &self.lengths {
            skills.push(self.table(source, l)?.skill(&self.series[target])?);
        }
        let skills: Arc<[Correlation]> = skills.into();
        if let Some(cache) = &self.results {
            cache.insert(key, Arc::clone(&skills));
        }
        Ok(skills)
    }

    /// Influence edge `source → target` by user index.
    pub fn influence_idx(&self, target: usize, source: usize) -> Result<InfluenceEdge, CcmError> {
        let skills = self.skills(target, source)?;
        Ok(edge_from_curve(
            &self.users[source],
            &self.users[target],
            &self.lengths,
            &skills,
            self.dim,
            self.delay,
        ))
    }

    /// Influence of `source` (u2) on `target` (u1).
    pub fn influence(&self, target: &str, source: &str) -> Option<Result<InfluenceEdge, CcmError>> {
        let t = self.index_of(target)?;
        let s = self.index_of(source)?;
        Some(self.influence_idx(t, s))
    }

    /// Scores every `(source, target)` pair; output order follows input.
    pub fn score_pairs(&self, pairs: &[(usize, usize)]) -> Vec<Result<InfluenceEdge, CcmError>> {
        pairs
            .par_iter()
            .map(|&(source, target)| self.influence_idx(target, source))
            .collect()
    }
}
