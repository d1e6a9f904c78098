//! Bagged CART ensemble with gini splits and per-split feature sampling.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifyError, UserClass};

pub const MODEL_HEADER: &str = "ACCD-FOREST v1";

const CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(F))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            max_features: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn features_per_split(&self, width: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (width as f64).sqrt().ceil() as usize)
            .clamp(1, width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Node {
    Leaf { class: u8 },
    Split { feature: u16, threshold: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class } => return *class as usize,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature as usize] <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    cfg: &'a ForestConfig,
    mtry: usize,
    width: usize,
    nodes: Vec<Node>,
}

fn gini_sum(counts: &[usize; CLASSES], n: usize) -> f64 {
    // n · gini, so sums over children compare directly
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    nf - counts.iter().map(|&c| (c * c) as f64).sum::<f64>() / nf
}

fn majority(counts: &[usize; CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { class: 0 });
        let mut counts = [0usize; CLASSES];
        for &i in idx.iter() {
            counts[self.ys[i]] += 1;
        }
        let n = idx.len();
        let leaf = Node::Leaf { class: majority(&counts) as u8 };
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.cfg.max_depth || n < 2 * self.cfg.min_leaf {
            self.nodes[id as usize] = leaf;
            return id;
        }
        let parent = gini_sum(&counts, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = sample(rng, self.width, self.width).into_vec();
        // the first mtry of a random permutation form the candidate set; the
        // rest are tried only if none of those yields a valid split
        let mut tried = 0;
        while tried < order.len() {
            let end = if tried == 0 { self.mtry } else { order.len() };
            for &f in &order[tried..end] {
                if let Some((score, thr)) = self.best_split(idx, f, &counts) {
                    if best.is_none_or(|b| score < b.0) {
                        best = Some((score, f, thr));
                    }
                }
            }
            tried = end;
            if best.is_some() {
                break;
            }
        }
        order.clear();
        match best {
            Some((score, f, thr)) if score < parent - 1e-12 => {
                let mid = partition(idx, |i| self.xs[i][f] <= thr);
                let (l, r) = idx.split_at_mut(mid);
                let left = self.build(l, depth + 1, rng);
                let right = self.build(r, depth + 1, rng);
                self.nodes[id as usize] = Node::Split {
                    feature: f as u16,
                    threshold: thr,
                    left,
                    right,
                };
            }
            _ => self.nodes[id as usize] = leaf,
        }
        id
    }

    fn best_split(&self, idx: &[usize], f: usize, total: &[usize; CLASSES]) -> Option<(f64, f64)> {
        let mut sorted: Vec<(f64, usize)> = idx.iter().map(|&i| (self.xs[i][f], self.ys[i])).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let min_leaf = self.cfg.min_leaf;
        let mut left = [0usize; CLASSES];
        let mut best: Option<(f64, f64)> = None;
        for i in 1..n {
            left[sorted[i - 1].1] += 1;
            if i < min_leaf || n - i < min_leaf || sorted[i - 1].0 >= sorted[i].0 {
                continue;
            }
            let mut right = *total;
            for c in 0..CLASSES {
                right[c] -= left[c];
            }
            let score = gini_sum(&left, i) + gini_sum(&right, n - i);
            if best.is_none_or(|b| score < b.0) {
                let (a, b) = (sorted[i - 1].0, sorted[i].0);
                let mut thr = a + (b - a) / 2.0;
                if thr >= b {
                    thr = a;
                }
                best = Some((score, thr));
            }
        }
        best
    }
}

fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut k = 0;
    for j in 0..idx.len() {
        if pred(idx[j]) {
            idx.swap(k, j);
            k += 1;
        }
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub n_features: usize,
    pub config: ForestConfig,
    pub oob_accuracy: Option<f64>,
    trees: Vec<Tree>,
}

/// Out-of-bag results from training, aligned with the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub oob_accuracy: Option<f64>,
    /// OOB vote fractions, `None` for rows that were in every bootstrap.
    pub oob_proba: Vec<Option<[f64; CLASSES]>>,
}

pub fn train(xs: &[Vec<f64>], ys: &[UserClass], cfg: &ForestConfig) -> Result<(TreeEnsemble, TrainReport), ClassifyError> {
    if xs.len() != ys.len() {
        return Err(ClassifyError::InsufficientData(format!("{} rows but {} labels", xs.len(), ys.len())));
    }
    if xs.len() < 10 {
        return Err(ClassifyError::InsufficientData(format!("{} samples, need at least 10", xs.len())));
    }
    let mut present = ys.to_vec();
    present.sort();
    present.dedup();
    if present.len() < 2 {
        return Err(ClassifyError::InsufficientData("fewer than 2 classes".into()));
    }
    if cfg.n_trees == 0 {
        return Err(ClassifyError::InsufficientData("zero trees requested".into()));
    }
    let width = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != width) {
        return Err(ClassifyError::FeatureWidth { expected: width, got: bad.len() });
    }
    let yi: Vec<usize> = ys.iter().map(|c| c.index()).collect();
    let n = xs.len();
    let mtry = cfg.features_per_split(width);

    let grown: Vec<(Tree, Vec<bool>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let mut in_bag = vec![false; n];
            let mut idx: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut b = Builder {
                xs,
                ys: &yi,
                cfg,
                mtry,
                width,
                nodes: Vec::new(),
            };
            b.build(&mut idx, 0, &mut rng);
            (Tree { nodes: b.nodes }, in_bag)
        })
        .collect();

    let mut votes = vec![[0usize; CLASSES]; n];
    for (tree, in_bag) in &grown {
        for i in 0..n {
            if !in_bag[i] {
                votes[i][tree.predict(&xs[i])] += 1;
            }
        }
    }
    let oob_proba: Vec<Option<[f64; CLASSES]>> = votes
        .iter()
        .map(|v| {
            let s: usize = v.iter().sum();
            (s > 0).then(|| v.map(|c| c as f64 / s as f64))
        })
        .collect();
    let (mut hit, mut seen) = (0usize, 0usize);
    for (i, v) in votes.iter().enumerate() {
        if v.iter().sum::<usize>() > 0 {
            seen += 1;
            if majority(v) == yi[i] {
                hit += 1;
            }
        }
    }
    let oob_accuracy = (seen > 0).then(|| hit as f64 / seen as f64);
    let model = TreeEnsemble {
        n_features: width,
        config: cfg.clone(),
        oob_accuracy,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
    };
    Ok((model, TrainReport { oob_accuracy, oob_proba }))
}

impl TreeEnsemble {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn votes(&self, x: &[f64]) -> [usize; CLASSES] {
        let mut v = [0usize; CLASSES];
        for t in &self.trees {
            v[t.predict(x)] += 1;
        }
        v
    }

    /// Vote fractions in `UserClass::ALL` order.
    pub fn predict_proba(&self, x: &[f64]) -> [f64; CLASSES] {
        let t = self.trees.len() as f64;
        self.votes(x).map(|c| c as f64 / t)
    }

    /// Majority class; ties go to the earlier class.
    pub fn predict(&self, x: &[f64]) -> UserClass {
        UserClass::ALL[majority(&self.votes(x))]
    }

    pub fn uncertainty(&self, x: &[f64]) -> f64 {
        uncertainty_of(&self.predict_proba(x))
    }

    pub fn check_width(&self, x: &[f64]) -> Result<(), ClassifyError> {
        if x.len() == self.n_features {
            Ok(())
        } else {
            Err(ClassifyError::FeatureWidth {
                expected: self.n_features,
                got: x.len(),
            })
        }
    }

    /// Content hash identifying this model, used to key pseudo-labels.
    pub fn version(&self) -> String {
        let body = serde_json::to_vec(&self.trees).expect("trees serialize");
        let digest = Sha256::digest(&body);
        hex::encode(&digest[..8])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ClassifyError> {
        writeln!(w, "{MODEL_HEADER}").map_err(|e| ClassifyError::ModelFormat(e.to_string()))?;
        serde_json::to_writer(&mut w, self).map_err(|e| ClassifyError::ModelFormat(e.to_string()))?;
        writeln!(w).map_err(|e| ClassifyError::ModelFormat(e.to_string()))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, ClassifyError> {
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| ClassifyError::ModelFormat(e.to_string()))?;
        if header.trim_end() != MODEL_HEADER {
            return Err(ClassifyError::ModelFormat(format!("unexpected header {:?}", header.trim_end())));
        }
        serde_json::from_reader(r).map_err(|e| ClassifyError::ModelFormat(e.to_string()))
    }
}

/// `1 − max` of a vote distribution.
pub fn uncertainty_of(p: &[f64; CLASSES]) -> f64 {
    1.0 - p.iter().copied().fold(0.0, f64::max)
}
