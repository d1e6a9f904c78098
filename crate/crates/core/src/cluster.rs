//! User clustering on temporal statistics to restrict cross-mapping to
//! within-cluster pairs plus a sampled share of cross-cluster pairs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ActivitySeries;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("invalid cluster count {k} for {users} users")]
    InvalidK { k: usize, users: usize },
    #[error("cross fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// Above this many users, users are first merged into grid cells.
pub const EXACT_LIMIT: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub user_id: String,
    pub mean: f64,
    pub variance: f64,
    pub burstiness: f64,
    pub entropy: f64,
}

impl ActivityStats {
    pub fn features(&self) -> [f64; 4] {
        [self.mean, self.variance, self.burstiness, self.entropy]
    }
}

/// Goh–Barabási burstiness `(σ − μ)/(σ + μ)` of inter-event gaps.
/// Zero for fewer than two events or when every gap is zero.
pub fn burstiness(timestamps: &[i64]) -> f64 {
    if timestamps.len() < 2 {
        return 0.0;
    }
    let mut ts = timestamps.to_vec();
    ts.sort_unstable();
    let gaps: Vec<f64> = ts.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let n = gaps.len() as f64;
    let mu = gaps.iter().sum::<f64>() / n;
    let sigma = (gaps.iter().map(|g| (g - mu) * (g - mu)).sum::<f64>() / n).sqrt();
    if sigma + mu == 0.0 {
        0.0
    } else {
        (sigma - mu) / (sigma + mu)
    }
}

/// Shannon entropy in bits of the normalized bin-count distribution.
pub fn bin_entropy(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn compute_stats(series: &ActivitySeries, timestamps: &[i64]) -> ActivityStats {
    let n = series.values.len().max(1) as f64;
    let mean = series.values.iter().sum::<f64>() / n;
    let variance = series.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ActivityStats {
        user_id: series.user_id.clone(),
        mean,
        variance,
        burstiness: burstiness(timestamps),
        entropy: bin_entropy(&series.values),
    }
}

/// Column-wise z-scores; zero-variance columns map to 0.
pub fn zscore(rows: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; 4];
    let mut sd = [0.0; 4];
    for j in 0..4 {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        sd[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
    }
    rows.iter()
        .map(|r| {
            let mut z = [0.0; 4];
            for j in 0..4 {
                z[j] = if sd[j] > 0.0 { (r[j] - mean[j]) / sd[j] } else { 0.0 };
            }
            z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id → member user ids (in input order).
    pub members: BTreeMap<usize, Vec<String>>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.values().map(Vec::len).collect()
    }

    pub fn cluster_of(&self) -> BTreeMap<&str, usize> {
        self.members
            .iter()
            .flat_map(|(&c, us)| us.iter().map(move |u| (u.as_str(), c)))
            .collect()
    }

    pub fn within_pair_count(&self) -> usize {
        self.members.values().map(|m| m.len() * m.len().saturating_sub(1)).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (c, users) in &self.members {
            out.push_str(&serde_json::json!({"cluster": c, "members": users}).to_string());
            out.push('\n');
        }
        out
    }
}

pub fn default_k(users: usize) -> usize {
    ((users as f64 / 10.0).sqrt().round() as usize).max(1)
}

/// Condensed symmetric distance matrix.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.n - a * (a + 1) / 2 + (b - a - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

fn euclid(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average-linkage merge of weighted groups until `k` remain. Returns the
/// surviving group ids (each the smallest id it absorbed) with members.
/// Ties merge the lexicographically smallest `(i, j)` pair.
fn average_linkage(points: &[[f64; 4]], weights: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dist = Condensed {
        n,
        d: vec![0.0; n * n.saturating_sub(1) / 2],
    };
    for i in 0..n {
        for j in i + 1..n {
            dist.set(i, j, euclid(&points[i], &points[j]));
        }
    }
    let mut active = vec![true; n];
    let mut size: Vec<usize> = weights.to_vec();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nd = vec![f64::INFINITY; n];

    let recompute = |i: usize, active: &[bool], dist: &Condensed, nn: &mut [usize], nd: &mut [f64]| {
        nn[i] = usize::MAX;
        nd[i] = f64::INFINITY;
        for j in 0..n {
            if j != i && active[j] {
                let d = dist.get(i, j);
                if d < nd[i] {
                    nd[i] = d;
                    nn[i] = j;
                }
            }
        }
    };
    for i in 0..n {
        recompute(i, &active, &dist, &mut nn, &mut nd);
    }

    let mut remaining = n;
    while remaining > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] || nn[i] == usize::MAX {
                continue;
            }
            let cand = (nd[i], i.min(nn[i]), i.max(nn[i]));
            let better = match best {
                None => true,
                Some(b) => cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2)),
            };
            if better {
                best = Some(cand);
            }
        }
        let (_, a, b) = best.expect("at least two active groups");
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for j in 0..n {
            if active[j] && j != a && j != b {
                let v = (sa * dist.get(a, j) + sb * dist.get(b, j)) / (sa + sb);
                dist.set(a, j, v);
            }
        }
        active[b] = false;
        size[a] += size[b];
        let absorbed = std::mem::take(&mut members[b]);
        members[a].extend(absorbed);
        remaining -= 1;

        recompute(a, &active, &dist, &mut nn, &mut nd);
        for j in 0..n {
            if !active[j] || j == a {
                continue;
            }
            if nn[j] == a || nn[j] == b {
                recompute(j, &active, &dist, &mut nn, &mut nd);
            } else {
                let d = dist.get(j, a);
                if d < nd[j] || (d == nd[j] && a < nn[j]) {
                    nd[j] = d;
                    nn[j] = a;
                }
            }
        }
    }
    (0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut m = std::mem::take(&mut members[i]);
            m.sort_unstable();
            m
        })
        .collect()
}

/// Collapses z-scored points onto grid cells so at most `limit` groups remain.
fn grid_precluster(z: &[[f64; 4]], limit: usize) -> Vec<Vec<usize>> {
    let mut cell = 0.05;
    loop {
        let mut cells: BTreeMap<[i64; 4], Vec<usize>> = BTreeMap::new();
        for (i, p) in z.iter().enumerate() {
            let key = [
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                (p[2] / cell).floor() as i64,
                (p[3] / cell).floor() as i64,
            ];
            cells.entry(key).or_default().push(i);
        }
        if cells.len() <= limit {
            let mut groups: Vec<Vec<usize>> = cells.into_values().collect();
            groups.sort_by_key(|g| g[0]);
            return groups;
        }
        cell *= 1.5;
    }
}

/// Average-linkage clustering of z-scored stats into `k` clusters. Cluster
/// ids are assigned in order of each cluster's first member.
pub fn agglomerate(stats: &[ActivityStats], k: usize) -> Result<ClusterAssignment, ClusterError> {
    let users = stats.len();
    if k == 0 || k > users {
        return Err(ClusterError::InvalidK { k, users });
    }
    let rows: Vec<[f64; 4]> = stats.iter().map(ActivityStats::features).collect();
    let z = zscore(&rows);
    let groups = if users > EXACT_LIMIT {
        let cells = grid_precluster(&z, EXACT_LIMIT);
        if cells.len() < k {
            return Err(ClusterError::InvalidK { k, users: cells.len() });
        }
        let centroids: Vec<[f64; 4]> = cells
            .iter()
            .map(|g| {
                let mut c = [0.0; 4];
                for &i in g {
                    for j in 0..4 {
                        c[j] += z[i][j] / g.len() as f64;
                    }
                }
                c
            })
            .collect();
        let weights: Vec<usize> = cells.iter().map(Vec::len).collect();
        average_linkage(&centroids, &weights, k)
            .into_iter()
            .map(|gs| {
                let mut m: Vec<usize> = gs.iter().flat_map(|&g| cells[g].iter().copied()).collect();
                m.sort_unstable();
                m
            })
            .collect()
    } else {
        average_linkage(&z, &vec![1; users], k)
    };
    let mut groups = groups;
    groups.sort_by_key(|g| g[0]);
    let members = groups
        .into_iter()
        .enumerate()
        .map(|(c, g)| (c, g.into_iter().map(|i| stats[i].user_id.clone()).collect()))
        .collect();
    Ok(ClusterAssignment { k, members })
}

/// Ordered `(source, target)` index pairs over `users` (the user order
/// the pairs index into).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSchedule {
    pub users: Vec<String>,
    pub pairs: Vec<(usize, usize)>,
    pub within: usize,
    pub cross: usize,
    pub cross_total: usize,
}

impl PairSchedule {
    pub fn naive_count(&self) -> usize {
        let u = self.users.len();
        u * u.saturating_sub(1)
    }
}

/// All within-cluster ordered pairs plus a seeded uniform sample of
/// `round(cross_fraction × cross_total)` cross-cluster ordered pairs.
pub fn schedule_pairs(
    assignment: &ClusterAssignment,
    cross_fraction: f64,
    seed: u64,
) -> Result<PairSchedule, ClusterError> {
    if !(0.0..=1.0).contains(&cross_fraction) {
        return Err(ClusterError::InvalidFraction(cross_fraction));
    }
    let mut users: Vec<String> = assignment.members.values().flatten().cloned().collect();
    users.sort();
    let index: BTreeMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut cluster_of = vec![0usize; users.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (c, m) in assignment.members.values().enumerate() {
        let mut g: Vec<usize> = m.iter().map(|u| index[u.as_str()]).collect();
        g.sort_unstable();
        for &i in &g {
            cluster_of[i] = c;
        }
        groups.push(g);
    }
    let mut pairs = Vec::new();
    for g in &groups {
        for &s in g {
            for &t in g {
                if s != t {
                    pairs.push((s, t));
                }
            }
        }
    }
    let within = pairs.len();

    // cross pairs enumerated by source in user order; prefix[s] counts pairs before s
    let u = users.len();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut prefix = Vec::with_capacity(u + 1);
    prefix.push(0usize);
    for s in 0..u {
        prefix.push(prefix[s] + (u - sizes[cluster_of[s]]));
    }
    let cross_total = prefix[u];
    let amount = (cross_fraction * cross_total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<usize> = rand::seq::index::sample(&mut rng, cross_total, amount.min(cross_total)).into_vec();
    sampled.sort_unstable();
    for idx in sampled {
        let s = prefix.partition_point(|&p| p <= idx) - 1;
        let mut rank = idx - prefix[s];
        // rank-th user outside s's cluster
        let mut t = 0;
        loop {
            if cluster_of[t] != cluster_of[s] {
                if rank == 0 {
                    break;
                }
                rank -= 1;
            }
            t += 1;
        }
        pairs.push((s, t));
    }
    pairs.sort_unstable();
    Ok(PairSchedule {
        users,
        within,
        cross: pairs.len() - within,
        cross_total,
        pairs,
    })
}

/// Every ordered pair; the naive schedule.
pub fn all_pairs(users: &[String]) -> PairSchedule {
    let mut users = users.to_vec();
    users.sort();
    let u = users.len();
    let pairs: Vec<(usize, usize)> = (0..u)
        .flat_map(|s| (0..u).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    PairSchedule {
        within: pairs.len(),
        cross: 0,
        cross_total: 0,
        users,
        pairs,
    }
}
