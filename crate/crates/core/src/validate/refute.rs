//! Refutation tests that should null or preserve an estimated effect.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EffectReport, Estimator, PairCausalFrame, ValidateError, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefutationKind {
    PlaceboTreatment,
    RandomSubset,
    TemporalHoldout,
}

impl RefutationKind {
    pub const ALL: [RefutationKind; 3] = [
        RefutationKind::PlaceboTreatment,
        RefutationKind::RandomSubset,
        RefutationKind::TemporalHoldout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RefutationKind::PlaceboTreatment => "placebo_treatment",
            RefutationKind::RandomSubset => "random_subset",
            RefutationKind::TemporalHoldout => "temporal_holdout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefutationResult {
    pub test: RefutationKind,
    pub verdict: Verdict,
    /// The re-estimate the verdict was based on (the later segment for the
    /// temporal holdout).
    pub check: EffectReport,
}

const PLACEBO_RATIO: f64 = 0.5;
const PLACEBO_MIN_P: f64 = 0.1;
const SUBSET_SHARE: f64 = 0.5;
const HOLDOUT_SPLIT: f64 = 0.7;

fn run(estimator: &dyn Estimator, frame: &PairCausalFrame, z: f64) -> Result<EffectReport, ValidateError> {
    estimator
        .estimate(frame)
        .map(|e| EffectReport::new(estimator.name(), e, z))
        .map_err(|e| ValidateError::SubsetDegenerate(e.to_string()))
}

/// Runs one refutation against `original`, the estimator's report on the
/// full frame.
pub fn refute(
    frame: &PairCausalFrame,
    estimator: &dyn Estimator,
    original: &EffectReport,
    test: RefutationKind,
    z: f64,
    seed: u64,
) -> Result<RefutationResult, ValidateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (check, pass) = match test {
        RefutationKind::PlaceboTreatment => {
            let mut t = frame.treatment.clone();
            t.shuffle(&mut rng);
            let r = run(estimator, &frame.with_treatment(t), z)?;
            let pass = r.effect.abs() < PLACEBO_RATIO * original.effect.abs() && r.p_value > PLACEBO_MIN_P;
            (r, pass)
        }
        RefutationKind::RandomSubset => {
            let n = frame.len();
            let mut idx = sample(&mut rng, n, (SUBSET_SHARE * n as f64).round() as usize).into_vec();
            idx.sort_unstable();
            let r = run(estimator, &frame.subset(&idx), z)?;
            let pass = r.overlaps(original);
            (r, pass)
        }
        RefutationKind::TemporalHoldout => {
            let n = frame.len();
            let cut = (HOLDOUT_SPLIT * n as f64).round() as usize;
            let early = run(estimator, &frame.subset(&(0..cut).collect::<Vec<_>>()), z)?;
            let late = run(estimator, &frame.subset(&(cut..n).collect::<Vec<_>>()), z)?;
            let pass = early.overlaps(&late);
            (late, pass)
        }
    };
    Ok(RefutationResult {
        test,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        check,
    })
}
