//! Treatment-effect estimators behind a common interface.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{PairCausalFrame, ValidateError};

/// Raw point estimate and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub effect: f64,
    pub stderr: f64,
}

pub trait Estimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, frame: &PairCausalFrame) -> Result<Estimate, ValidateError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    DiffInMeans,
    RegressionAdjusted,
    KnnMatching,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::DiffInMeans,
        EstimatorKind::RegressionAdjusted,
        EstimatorKind::KnnMatching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::DiffInMeans => "diff_in_means",
            EstimatorKind::RegressionAdjusted => "regression_adjusted",
            EstimatorKind::KnnMatching => "knn_matching",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown estimator {s:?}"))
    }
}

impl Estimator for EstimatorKind {
    fn name(&self) -> &str {
        self.as_str()
    }

    fn estimate(&self, frame: &PairCausalFrame) -> Result<Estimate, ValidateError> {
        match self {
            EstimatorKind::DiffInMeans => diff_in_means(frame),
            EstimatorKind::RegressionAdjusted => regression_adjusted(frame),
            EstimatorKind::KnnMatching => knn_matching(frame),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub estimator: String,
    pub effect: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub refutations: BTreeMap<String, Verdict>,
}

impl EffectReport {
    pub fn new(estimator: &str, est: Estimate, z: f64) -> Self {
        let half = z * est.stderr;
        EffectReport {
            estimator: estimator.to_string(),
            effect: est.effect,
            stderr: est.stderr,
            ci_low: est.effect - half,
            ci_high: est.effect + half,
            p_value: p_value(est.effect, est.stderr),
            score: None,
            weight: None,
            refutations: BTreeMap::new(),
        }
    }

    pub fn overlaps(&self, other: &EffectReport) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

/// Two-sided normal p-value for `effect / stderr`.
pub fn p_value(effect: f64, stderr: f64) -> f64 {
    let z = (effect / stderr).abs();
    libm::erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Two-sided critical value for the given confidence level.
pub fn z_critical(confidence: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

fn arms(frame: &PairCausalFrame) -> Result<(Vec<f64>, Vec<f64>), ValidateError> {
    let (mut t, mut c) = (Vec::new(), Vec::new());
    for (&tr, &y) in frame.treatment.iter().zip(&frame.outcome) {
        if tr {
            t.push(y);
        } else {
            c.push(y);
        }
    }
    if t.is_empty() || c.is_empty() {
        return Err(ValidateError::DegenerateArm(format!("{} treated, {} control", t.len(), c.len())));
    }
    Ok((t, c))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() < 2 {
        0.0
    } else {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    };
    (m, var)
}

fn checked(effect: f64, stderr: f64, what: &str) -> Result<Estimate, ValidateError> {
    if !(stderr.is_finite() && stderr > 0.0 && effect.is_finite()) {
        return Err(ValidateError::DegenerateArm(format!("{what}: undefined standard error")));
    }
    Ok(Estimate { effect, stderr })
}

/// Difference of arm means with Welch's standard error.
pub fn diff_in_means(frame: &PairCausalFrame) -> Result<Estimate, ValidateError> {
    let (t, c) = arms(frame)?;
    if t.len() < 2 || c.len() < 2 {
        return Err(ValidateError::DegenerateArm("each arm needs two units".into()));
    }
    let (mt, vt) = mean_var(&t);
    let (mc, vc) = mean_var(&c);
    checked(mt - mc, (vt / t.len() as f64 + vc / c.len() as f64).sqrt(), "diff_in_means")
}

/// OLS of outcome on `[1, treatment, covariates]`; the effect is the
/// treatment coefficient with its classical standard error.
pub fn regression_adjusted(frame: &PairCausalFrame) -> Result<Estimate, ValidateError> {
    arms(frame)?;
    let n = frame.len();
    let p = 2 + frame.covariate_width();
    if n <= p {
        return Err(ValidateError::DegenerateArm(format!("{n} rows for {p} coefficients")));
    }
    let x = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(frame.treatment[i])),
        _ => frame.covariates[i][j - 2],
    });
    let y = DVector::from_column_slice(&frame.outcome);
    let xtx = x.transpose() * &x;
    let inv = xtx
        .cholesky()
        .ok_or_else(|| ValidateError::DegenerateArm("singular design matrix".into()))?
        .inverse();
    let beta = &inv * (x.transpose() * &y);
    let resid = &y - &x * &beta;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    checked(beta[1], (sigma2 * inv[(1, 1)]).sqrt(), "regression_adjusted")
}

/// All rows of `pool` at the minimum covariate distance from `from`.
fn nearest_ties(from: &[f64], pool: &[usize], covs: &[Vec<f64>]) -> Vec<usize> {
    let mut best = f64::INFINITY;
    let mut ties = Vec::new();
    for &j in pool {
        let d: f64 = from.iter().zip(&covs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best {
            best = d;
            ties.clear();
        }
        if d == best {
            ties.push(j);
        }
    }
    ties
}

/// One-nearest-neighbour matching with replacement. Every unit is matched
/// to the closest row(s) of the other arm, averaging over distance ties,
/// and the effect is the mean treated-minus-control difference over all
/// units.
///
/// The estimate equals `(1/N)·Σ (2W_i − 1)(1 + K_i)·Y_i`, where `K_i` is
/// how often unit `i` serves as a match (fractionally under ties). The
/// standard error comes from that form, with each arm's outcome variance
/// standing in for the unit-level variance, so heavily reused matches
/// widen it.
pub fn knn_matching(frame: &PairCausalFrame) -> Result<Estimate, ValidateError> {
    let (t, c) = arms(frame)?;
    if t.len() < 2 || c.len() < 2 {
        return Err(ValidateError::DegenerateArm("each arm needs two units".into()));
    }
    let treated: Vec<usize> = (0..frame.len()).filter(|&i| frame.treatment[i]).collect();
    let control: Vec<usize> = (0..frame.len()).filter(|&i| !frame.treatment[i]).collect();
    let n = frame.len();
    let mut reuse = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let pool = if frame.treatment[i] { &control } else { &treated };
        let ties = nearest_ties(&frame.covariates[i], pool, &frame.covariates);
        let share = 1.0 / ties.len() as f64;
        let matched: f64 = ties.iter().map(|&j| frame.outcome[j]).sum::<f64>() * share;
        for &j in &ties {
            reuse[j] += share;
        }
        total += if frame.treatment[i] {
            frame.outcome[i] - matched
        } else {
            matched - frame.outcome[i]
        };
    }
    let (_, vt) = mean_var(&t);
    let (_, vc) = mean_var(&c);
    let var: f64 = (0..n)
        .map(|i| {
            let w = 1.0 + reuse[i];
            w * w * if frame.treatment[i] { vt } else { vc }
        })
        .sum::<f64>()
        / (n * n) as f64;
    checked(total / n as f64, var.sqrt(), "knn_matching")
}
