//! Effect validation for candidate pairs: estimator ensemble weighted by a
//! multi-objective score, an experience-adjusted significance threshold,
//! and refutation tests.

mod calibration;
mod estimators;
mod frame;
mod history;
mod refute;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{calibrate, Calibration, CalibrationEntry};
pub use estimators::{
    diff_in_means, knn_matching, p_value, regression_adjusted, z_critical, EffectReport, Estimate, Estimator,
    EstimatorKind, Verdict,
};
pub use frame::{PairCausalFrame, COVARIATE_LAGS};
pub use history::{adaptive_threshold, profile_key, CaseKind, CausalCase, DatasetProfile, HistoryStore};
pub use refute::{refute, RefutationKind, RefutationResult};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("degenerate arm: {0}")]
    DegenerateArm(String),
    #[error("standard error must be positive, got {0}")]
    ZeroStderr(f64),
    #[error("only {succeeded} estimator(s) succeeded, need 2")]
    AllEstimatorsFailed { succeeded: usize },
    #[error("subset degenerate: {0}")]
    SubsetDegenerate(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] crate::journal::StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub theta_base: f64,
    pub threshold_gamma: f64,
    /// Use `exp(−γ·sr)` instead of the printed `exp(+γ·sr)`.
    pub invert_threshold: bool,
    pub stderr_weight: f64,
    pub precision_weight: f64,
    pub recall_weight: f64,
    pub confidence: f64,
    /// How many top-scoring estimators must have pairwise overlapping CIs.
    pub overlap_models: usize,
    pub estimators: Vec<EstimatorKind>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            theta_base: 0.05,
            threshold_gamma: 0.2,
            invert_threshold: false,
            stderr_weight: 0.4,
            precision_weight: 0.3,
            recall_weight: 0.3,
            confidence: 0.95,
            overlap_models: 2,
            estimators: EstimatorKind::ALL.to_vec(),
        }
    }
}

impl ValidateConfig {
    pub fn validate(&self) -> Result<(), ValidateError> {
        let bad = |m: &str| Err(ValidateError::InvalidConfig(m.into()));
        if !(self.theta_base > 0.0 && self.theta_base < 1.0) {
            return bad("theta_base must lie in (0, 1)");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.overlap_models < 1 {
            return bad("overlap_models must be at least 1");
        }
        if self.estimators.len() < 2 {
            return bad("at least two estimators are required");
        }
        Ok(())
    }

    pub fn z(&self) -> f64 {
        z_critical(self.confidence)
    }
}

/// `w_se/stderr + w_p·precision + w_r·recall`. The bounded terms are
/// summed first so that round inputs give round scores.
pub fn score_model(stderr: f64, precision: f64, recall: f64, cfg: &ValidateConfig) -> Result<f64, ValidateError> {
    if !(stderr > 0.0) {
        return Err(ValidateError::ZeroStderr(stderr));
    }
    Ok(cfg.stderr_weight / stderr + (cfg.precision_weight * precision + cfg.recall_weight * recall))
}

/// Ensemble estimate with its members and the retention decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub ensemble: EffectReport,
    /// Members in descending score order.
    pub members: Vec<EffectReport>,
    pub threshold: f64,
    pub significant: bool,
    pub ci_overlap: bool,
    pub validated: bool,
    pub profile: DatasetProfile,
}

impl EnsembleOutcome {
    pub fn weights_sum(&self) -> f64 {
        self.members.iter().filter_map(|m| m.weight).sum()
    }

    pub fn top(&self) -> &EffectReport {
        &self.members[0]
    }
}

/// Combines scored member reports into the ensemble. Weights are scores
/// normalized to sum to 1; the ensemble stderr is the weighted mean of
/// member stderrs.
pub fn combine(mut members: Vec<EffectReport>, z: f64) -> (EffectReport, Vec<EffectReport>) {
    members.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .total_cmp(&a.score.unwrap_or(0.0))
            .then_with(|| a.estimator.cmp(&b.estimator))
    });
    let total: f64 = members.iter().map(|m| m.score.unwrap_or(0.0)).sum();
    for m in &mut members {
        m.weight = Some(m.score.unwrap_or(0.0) / total);
    }
    let effect: f64 = members.iter().map(|m| m.weight.unwrap() * m.effect).sum();
    let stderr: f64 = members.iter().map(|m| m.weight.unwrap() * m.stderr).sum();
    let mut ens = EffectReport::new("ensemble", Estimate { effect, stderr }, z);
    ens.score = Some(total);
    ens.weight = Some(1.0);
    (ens, members)
}

fn pairwise_overlap(reports: &[EffectReport]) -> bool {
    reports
        .iter()
        .enumerate()
        .all(|(i, a)| reports[i + 1..].iter().all(|b| a.overlaps(b)))
}

/// Runs every estimator, scores them from history (or calibration when
/// the profile has no history) and decides retention: the ensemble p-value
/// must beat the adaptive threshold and the top-scoring CIs must overlap.
pub fn ensemble_validate(
    frame: &PairCausalFrame,
    estimators: &[&dyn Estimator],
    profile: &DatasetProfile,
    history: &HistoryStore,
    calibration: &Calibration,
    cfg: &ValidateConfig,
) -> Result<EnsembleOutcome, ValidateError> {
    let z = cfg.z();
    let key = &profile.profile_key;
    let mut members = Vec::new();
    for e in estimators {
        let Ok(est) = e.estimate(frame) else { continue };
        let cold = calibration.get(e.name());
        let precision = history.precision(key, e.name()).unwrap_or(cold.precision);
        let recall = history.recall(key, e.name()).unwrap_or(cold.recall);
        let mut r = EffectReport::new(e.name(), est, z);
        r.score = Some(score_model(est.stderr, precision, recall, cfg)?);
        members.push(r);
    }
    if members.len() < 2 {
        return Err(ValidateError::AllEstimatorsFailed { succeeded: members.len() });
    }
    let (ensemble, members) = combine(members, z);
    let threshold = adaptive_threshold(
        cfg.theta_base,
        history.success_rate(key),
        cfg.threshold_gamma,
        cfg.invert_threshold,
    );
    let significant = ensemble.p_value < threshold;
    let top = cfg.overlap_models.min(members.len());
    let ci_overlap = pairwise_overlap(&members[..top]);
    Ok(EnsembleOutcome {
        ensemble,
        members,
        threshold,
        significant,
        ci_overlap,
        validated: significant && ci_overlap,
        profile: profile.clone(),
    })
}

/// Appends one case per member estimator, judged against `validated`.
pub fn record_outcome(
    history: &mut HistoryStore,
    outcome: &EnsembleOutcome,
    validated: bool,
) -> Result<(), ValidateError> {
    for m in &outcome.members {
        let significant = m.p_value < outcome.threshold;
        history.append(CausalCase::new(&outcome.profile.profile_key, &m.estimator, significant, validated))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::gen_causal_frame;

    fn report(name: &str, effect: f64, stderr: f64, score: f64) -> EffectReport {
        let mut r = EffectReport::new(name, Estimate { effect, stderr }, 1.959963984540054);
        r.score = Some(score);
        r
    }

    #[test]
    fn score_spot_values() {
        let cfg = ValidateConfig::default();
        assert_eq!(score_model(0.4, 0.5, 0.5, &cfg).unwrap(), 1.3);
        let a = score_model(0.2, 0.7, 0.1, &cfg).unwrap();
        let b = score_model(0.4, 0.7, 0.1, &cfg).unwrap();
        assert!((a - b - 1.0).abs() < 1e-12);
        assert!((score_model(1e12, 1.0, 1.0, &cfg).unwrap() - 0.6).abs() < 1e-9);
        assert!(matches!(score_model(0.0, 1.0, 1.0, &cfg), Err(ValidateError::ZeroStderr(_))));
    }

    #[test]
    fn ensemble_weighting() {
        let (e, m) = combine(vec![report("a", 1.0, 0.5, 2.0), report("b", 3.0, 0.5, 2.0)], 1.96);
        assert_eq!(e.effect, 2.0);
        assert_eq!(m.iter().map(|r| r.weight.unwrap()).sum::<f64>(), 1.0);
        let (e, _) = combine(vec![report("a", 2.0, 0.5, 3.0), report("b", 4.0, 0.5, 1.0)], 1.96);
        assert_eq!(e.effect, 2.5);
    }

    #[test]
    fn disjoint_cis_never_validate() {
        let a = EffectReport {
            ci_low: 1.0,
            ci_high: 2.0,
            ..report("a", 1.5, 0.1, 1.0)
        };
        let b = EffectReport {
            ci_low: 5.0,
            ci_high: 6.0,
            ..report("b", 5.5, 0.1, 1.0)
        };
        assert!(!pairwise_overlap(&[a.clone(), b.clone()]));
        assert!(pairwise_overlap(&[a.clone(), a]));
    }

    #[test]
    fn validates_real_effect_and_records_history() {
        let (f, _) = gen_causal_frame(600, 2.0, 0.0, 5);
        let cfg = ValidateConfig::default();
        let profile = DatasetProfile::of_frame(&f, 300);
        let mut h = HistoryStore::in_memory();
        let cal = Calibration::neutral();
        let ests: Vec<&dyn Estimator> = EstimatorKind::ALL.iter().map(|k| k as &dyn Estimator).collect();
        let out = ensemble_validate(&f, &ests, &profile, &h, &cal, &cfg).unwrap();
        assert!(out.validated);
        assert_eq!(out.threshold, 0.05);
        assert!((out.weights_sum() - 1.0).abs() < 1e-12);
        let lo = out.members.iter().map(|m| m.effect).fold(f64::INFINITY, f64::min);
        let hi = out.members.iter().map(|m| m.effect).fold(f64::NEG_INFINITY, f64::max);
        assert!(out.ensemble.effect >= lo && out.ensemble.effect <= hi);
        record_outcome(&mut h, &out, true).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.success_rate(&profile.profile_key) > 0.0);
        let again = ensemble_validate(&f, &ests, &profile, &h, &cal, &cfg).unwrap();
        assert!(again.threshold > 0.05);
    }

    #[test]
    fn single_working_estimator_is_an_error() {
        let mut f = gen_causal_frame(50, 1.0, 0.0, 1).0;
        f.treatment.iter_mut().for_each(|t| *t = true);
        let ests: Vec<&dyn Estimator> = EstimatorKind::ALL.iter().map(|k| k as &dyn Estimator).collect();
        let r = ensemble_validate(
            &f,
            &ests,
            &DatasetProfile::of_frame(&f, 1),
            &HistoryStore::in_memory(),
            &Calibration::neutral(),
            &ValidateConfig::default(),
        );
        assert!(matches!(r, Err(ValidateError::AllEstimatorsFailed { .. })));
    }

    #[test]
    fn config_checks() {
        assert!(ValidateConfig::default().validate().is_ok());
        let c = ValidateConfig { estimators: vec![EstimatorKind::DiffInMeans], ..ValidateConfig::default() };
        assert!(c.validate().is_err());
        let c = ValidateConfig { theta_base: 0.0, ..ValidateConfig::default() };
        assert!(c.validate().is_err());
    }
}
