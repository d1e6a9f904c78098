//! Delay-coordinate embeddings and exact k-nearest-neighbour search.
//!
//! The point at time `t` is `[X(t), X(t−τ), …, X(t−(E−1)τ)]`, newest first.
//! The first embeddable time index is `(E−1)·τ`.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ActivitySeries;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("series of length {len} too short for E={dim}, tau={delay}: need at least {required}")]
    SeriesTooShort {
        len: usize,
        dim: usize,
        delay: usize,
        required: usize,
    },
    #[error("invalid embedding parameters E={dim}, tau={delay}")]
    InvalidParams { dim: usize, delay: usize },
    #[error("asked for {k} neighbours but only {available} points are eligible")]
    NotEnoughPoints { k: usize, available: usize },
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub fn warmup(dim: usize, delay: usize) -> usize {
    (dim - 1) * delay
}

pub fn point_count(len: usize, dim: usize, delay: usize) -> usize {
    len.saturating_sub(warmup(dim, delay))
}

/// Embedded points stored row-major; point `i` lives at time `first_time + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayEmbedding {
    pub user_id: String,
    pub dim: usize,
    pub delay: usize,
    first_time: usize,
    coords: Vec<f64>,
}

impl DelayEmbedding {
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn first_time(&self) -> usize {
        self.first_time
    }

    pub fn time_of(&self, i: usize) -> usize {
        self.first_time + i
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.coords
            .chunks_exact(self.dim)
            .enumerate()
            .map(move |(i, v)| (self.first_time + i, v))
    }

    /// The first `n` points, in time order.
    pub fn prefix(&self, n: usize) -> DelayEmbedding {
        let n = n.min(self.len());
        DelayEmbedding {
            user_id: self.user_id.clone(),
            dim: self.dim,
            delay: self.delay,
            first_time: self.first_time,
            coords: self.coords[..n * self.dim].to_vec(),
        }
    }

    pub fn to_jsonl_value(&self) -> serde_json::Value {
        let points: Vec<_> = self.points().map(|(t, v)| serde_json::json!([t, v])).collect();
        serde_json::json!({
            "user_id": self.user_id,
            "E": self.dim,
            "tau": self.delay,
            "points": points,
        })
    }
}

fn check_params(dim: usize, delay: usize) -> Result<(), EmbedError> {
    if dim == 0 || delay == 0 {
        return Err(EmbedError::InvalidParams { dim, delay });
    }
    Ok(())
}

/// Batch embedding of a whole series.
pub fn embed_series(series: &ActivitySeries, dim: usize, delay: usize) -> Result<DelayEmbedding, EmbedError> {
    embed_values(&series.user_id, &series.values, dim, delay)
}

pub fn embed_values(
    user_id: &str,
    values: &[f64],
    dim: usize,
    delay: usize,
) -> Result<DelayEmbedding, EmbedError> {
    check_params(dim, delay)?;
    let w = warmup(dim, delay);
    if values.len() < w + 1 {
        return Err(EmbedError::SeriesTooShort {
            len: values.len(),
            dim,
            delay,
            required: w + 1,
        });
    }
    let mut coords = Vec::with_capacity((values.len() - w) * dim);
    for t in w..values.len() {
        for j in 0..dim {
            coords.push(values[t - j * delay]);
        }
    }
    Ok(DelayEmbedding {
        user_id: user_id.to_string(),
        dim,
        delay,
        first_time: w,
        coords,
    })
}

/// Rolling buffer holding the last `(E−1)·τ + 1` values; each push emits
/// the newest embedded vector once warm.
#[derive(Debug, Clone)]
pub struct RollingEmbedder {
    dim: usize,
    delay: usize,
    buf: VecDeque<f64>,
    seen: usize,
}

impl RollingEmbedder {
    pub fn new(dim: usize, delay: usize) -> Result<Self, EmbedError> {
        check_params(dim, delay)?;
        Ok(RollingEmbedder {
            dim,
            delay,
            buf: VecDeque::with_capacity(warmup(dim, delay) + 1),
            seen: 0,
        })
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn push(&mut self, value: f64) -> Option<Vec<f64>> {
        let cap = warmup(self.dim, self.delay) + 1;
        if self.buf.len() == cap {
            self.buf.pop_front();
        }
        self.buf.push_back(value);
        self.seen += 1;
        if self.buf.len() < cap {
            return None;
        }
        let newest = cap - 1;
        Some((0..self.dim).map(|j| self.buf[newest - j * self.delay]).collect())
    }

    /// Drains a whole series through the buffer into an embedding.
    pub fn embed_all(
        user_id: &str,
        values: &[f64],
        dim: usize,
        delay: usize,
    ) -> Result<DelayEmbedding, EmbedError> {
        let mut r = RollingEmbedder::new(dim, delay)?;
        let w = warmup(dim, delay);
        if values.len() < w + 1 {
            return Err(EmbedError::SeriesTooShort {
                len: values.len(),
                dim,
                delay,
                required: w + 1,
            });
        }
        let mut coords = Vec::with_capacity((values.len() - w) * dim);
        for &v in values {
            if let Some(p) = r.push(v) {
                coords.extend_from_slice(&p);
            }
        }
        Ok(DelayEmbedding {
            user_id: user_id.to_string(),
            dim,
            delay,
            first_time: w,
            coords,
        })
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One neighbour: time index and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub time: usize,
    pub distance: f64,
}

/// Ordering used everywhere for neighbour ranking: distance, then time.
#[inline]
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact kd-tree over embedded points with a temporal exclusion window.
///
/// A query given `exclude_time = Some(t)` skips points whose time index
/// satisfies `|t_j − t| < excluded_radius`; radius 0 excludes nothing.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    pub excluded_radius: usize,
    times: Vec<usize>,
    coords: Vec<f64>,
    nodes: Vec<Node>,
}

pub fn build_index(embedding: &DelayEmbedding, excluded_radius: usize) -> NeighborIndex {
    NeighborIndex::new(
        embedding.dim,
        embedding.points().map(|(t, v)| (t, v.to_vec())).collect(),
        excluded_radius,
    )
}

pub fn query_knn(
    index: &NeighborIndex,
    point: &[f64],
    k: usize,
    exclude_time: Option<usize>,
) -> Result<Vec<Neighbor>, EmbedError> {
    index.query(point, k, exclude_time)
}

impl NeighborIndex {
    pub fn new(dim: usize, mut points: Vec<(usize, Vec<f64>)>, excluded_radius: usize) -> Self {
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&mut points, 0, dim, &mut nodes);
        }
        let times = points.iter().map(|p| p.0).collect();
        let coords = points.iter().flat_map(|p| p.1.iter().copied()).collect();
        NeighborIndex {
            dim,
            excluded_radius,
            times,
            coords,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn excluded(&self, t: usize, exclude_time: Option<usize>) -> bool {
        match exclude_time {
            Some(x) => t.abs_diff(x) < self.excluded_radius,
            None => false,
        }
    }

    /// Number of indexed points not removed by the exclusion window.
    pub fn eligible(&self, exclude_time: Option<usize>) -> usize {
        self.times.iter().filter(|&&t| !self.excluded(t, exclude_time)).count()
    }

    pub fn query(
        &self,
        point: &[f64],
        k: usize,
        exclude_time: Option<usize>,
    ) -> Result<Vec<Neighbor>, EmbedError> {
        if point.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, point, k, exclude_time, &mut best);
        }
        if k == 0 || best.len() < k {
            return Err(EmbedError::NotEnoughPoints {
                k,
                available: self.eligible(exclude_time),
            });
        }
        Ok(best
            .into_iter()
            .map(|(d2, time)| Neighbor {
                time,
                distance: d2.sqrt(),
            })
            .collect())
    }

    fn search(
        &self,
        node: usize,
        q: &[f64],
        k: usize,
        exclude_time: Option<usize>,
        best: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let t = self.times[i];
                    if self.excluded(t, exclude_time) {
                        continue;
                    }
                    let d2 = squared_distance(q, &self.coords[i * self.dim..(i + 1) * self.dim]);
                    insert_bounded(best, (d2, t), k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude_time, best);
                // equal-distance candidates must still be visited for the time tie-break
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, q, k, exclude_time, best);
                }
            }
        }
    }
}

fn insert_bounded(best: &mut Vec<(f64, usize)>, cand: (f64, usize), k: usize) {
    if best.len() == k && rank(cand, best[k - 1]) != Ordering::Less {
        return;
    }
    let pos = best
        .binary_search_by(|probe| rank(*probe, cand))
        .unwrap_or_else(|p| p);
    best.insert(pos, cand);
    if best.len() > k {
        best.pop();
    }
}

/// Builds nodes over `points` (reordered in place); returns the node id.
fn build_node(points: &mut [(usize, Vec<f64>)], offset: usize, dim: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if points.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + points.len(),
        });
        return id;
    }
    // split on the axis of widest spread
    let axis = (0..dim)
        .max_by(|&a, &b| {
            let spread = |ax: usize| {
                let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.1[ax]), hi.max(p.1[ax]))
                });
                hi - lo
            };
            spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
        })
        .unwrap_or(0);
    points.sort_by(|a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
    let mid = points.len() / 2;
    let value = points[mid - 1].1[axis];
    // left holds values <= split, right holds values >= split
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lo, hi) = points.split_at_mut(mid);
    let left = build_node(lo, offset, dim, nodes);
    let right = build_node(hi, offset + mid, dim, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

/// Exhaustive scan with the same ranking as the index; the test oracle.
pub fn brute_force_knn(
    embedding: &DelayEmbedding,
    point: &[f64],
    k: usize,
    exclude_time: Option<usize>,
    excluded_radius: usize,
) -> Vec<Neighbor> {
    let mut all: Vec<(f64, usize)> = embedding
        .points()
        .filter(|(t, _)| match exclude_time {
            Some(x) => t.abs_diff(x) >= excluded_radius,
            None => true,
        })
        .map(|(t, v)| (squared_distance(point, v), t))
        .collect();
    all.sort_by(|a, b| rank(*a, *b));
    all.truncate(k);
    all.into_iter()
        .map(|(d2, time)| Neighbor {
            time,
            distance: d2.sqrt(),
        })
        .collect()
}
