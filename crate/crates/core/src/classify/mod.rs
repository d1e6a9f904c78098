//! Account classification: behavioral features, a bagged tree ensemble,
//! uncertainty-driven label queries, curriculum training and pseudo-labels.

mod active;
mod curriculum;
mod features;
mod forest;
mod labels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use active::{labels_to_reach, ActiveConfig, SamplingStrategy};
pub use curriculum::{curriculum_train, CurriculumConfig, CurriculumLog, StageEntry, StageOutcome};
pub use features::{extract_features, extract_all, FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
pub use forest::{train, uncertainty_of, ForestConfig, TrainReport, TreeEnsemble, MODEL_HEADER};
pub use labels::{
    harvest_pseudo_labels, next_queries, LabelQueueItem, LabelRecord, LabelSource, LabelStatus, LabelStore,
    PSEUDO_CONFIDENCE,
};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("feature width {got}, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Store(#[from] crate::journal::StoreError),
}

/// The four behavioral account categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UserClass {
    Fake,
    Org,
    Political,
    Individual,
}

impl UserClass {
    pub const ALL: [UserClass; 4] = [UserClass::Fake, UserClass::Org, UserClass::Political, UserClass::Individual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UserClass::Fake => "Fake",
            UserClass::Org => "Org",
            UserClass::Political => "Political",
            UserClass::Individual => "Individual",
        }
    }
}

impl std::fmt::Display for UserClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for UserClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

/// Fraction of rows where `model` predicts the given class.
pub fn accuracy(model: &TreeEnsemble, xs: &[Vec<f64>], ys: &[UserClass]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let hits = xs.iter().zip(ys).filter(|(x, &y)| model.predict(x) == y).count();
    hits as f64 / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_round_trip() {
        for c in UserClass::ALL {
            assert_eq!(c.as_str().parse::<UserClass>().unwrap(), c);
            assert_eq!(UserClass::from_index(c.index()), Some(c));
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert!("fake".parse::<UserClass>().is_err());
        assert_eq!(UserClass::from_index(4), None);
    }
}
