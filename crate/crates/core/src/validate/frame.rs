use serde::{Deserialize, Serialize};

/// Number of lagged target bins used as covariates.
pub const COVARIATE_LAGS: usize = 3;

/// Unit-level rows for treatment-effect estimation, in time order.
///
/// For a coordination pair the unit is a time bin `t`: treatment is whether
/// the source was active in `t`, the outcome is the target's activity in
/// `t + 1`, and the covariates are the target's activity in `t, t−1, t−2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCausalFrame {
    pub source: String,
    pub target: String,
    pub bins: Vec<usize>,
    pub treatment: Vec<bool>,
    pub outcome: Vec<f64>,
    /// Row-major, one `Vec` per unit.
    pub covariates: Vec<Vec<f64>>,
}

impl PairCausalFrame {
    pub fn from_pair(source: &str, target: &str, source_values: &[f64], target_values: &[f64]) -> Self {
        let n = source_values.len().min(target_values.len());
        let mut frame = PairCausalFrame {
            source: source.to_string(),
            target: target.to_string(),
            bins: Vec::new(),
            treatment: Vec::new(),
            outcome: Vec::new(),
            covariates: Vec::new(),
        };
        for t in (COVARIATE_LAGS - 1)..n.saturating_sub(1) {
            frame.bins.push(t);
            frame.treatment.push(source_values[t] > 0.0);
            frame.outcome.push(target_values[t + 1]);
            frame
                .covariates
                .push((0..COVARIATE_LAGS).map(|j| target_values[t - j]).collect());
        }
        frame
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn covariate_width(&self) -> usize {
        self.covariates.first().map(Vec::len).unwrap_or(0)
    }

    pub fn treated_count(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    pub fn treatment_ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.treated_count() as f64 / self.len() as f64
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        PairCausalFrame {
            source: self.source.clone(),
            target: self.target.clone(),
            bins: indices.iter().map(|&i| self.bins[i]).collect(),
            treatment: indices.iter().map(|&i| self.treatment[i]).collect(),
            outcome: indices.iter().map(|&i| self.outcome[i]).collect(),
            covariates: indices.iter().map(|&i| self.covariates[i].clone()).collect(),
        }
    }

    pub fn with_treatment(&self, treatment: Vec<bool>) -> Self {
        assert_eq!(treatment.len(), self.len());
        PairCausalFrame {
            treatment,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_lag_layout() {
        let src = [0.0, 1.0, 0.0, 2.0, 0.0, 1.0];
        let tgt = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let f = PairCausalFrame::from_pair("s", "t", &src, &tgt);
        assert_eq!(f.bins, vec![2, 3, 4]);
        assert_eq!(f.treatment, vec![false, true, false]);
        assert_eq!(f.outcome, vec![8.0, 9.0, 10.0]);
        assert_eq!(f.covariates[0], vec![7.0, 6.0, 5.0]);
        assert_eq!(f.covariates[2], vec![9.0, 8.0, 7.0]);
        assert_eq!(f.treated_count(), 1);
    }

    #[test]
    fn too_short_is_empty() {
        assert!(PairCausalFrame::from_pair("s", "t", &[1.0, 1.0], &[1.0, 1.0]).is_empty());
    }
}
