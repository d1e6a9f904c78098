//! Cold-start precision and recall per estimator from synthetic frames
//! with known effects.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{p_value, EstimatorKind, Estimator, ValidateConfig};
use crate::journal::{io_err, StoreError};
use crate::synthgen::gen_causal_frame;

const FRAMES_PER_ARM: u64 = 20;
const FRAME_ROWS: usize = 300;
const EFFECT: f64 = 0.5;
const CONFOUNDING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub entries: BTreeMap<String, CalibrationEntry>,
}

impl Calibration {
    /// Precision and recall of 0.5 for every estimator.
    pub fn neutral() -> Self {
        Calibration { entries: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> CalibrationEntry {
        self.entries.get(name).copied().unwrap_or(CalibrationEntry {
            precision: 0.5,
            recall: 0.5,
        })
    }

    /// Reads the cached calibration at `path`, computing and writing it
    /// on first use.
    pub fn load_or_compute(path: &Path, cfg: &ValidateConfig) -> Result<Self, StoreError> {
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            return serde_json::from_str(&text).map_err(StoreError::from);
        }
        let cal = calibrate(&cfg.estimators, cfg);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let body = serde_json::to_string_pretty(&cal).map_err(StoreError::from)?;
        std::fs::write(path, body).map_err(io_err(path))?;
        Ok(cal)
    }
}

/// Each estimator calls frames significant at `theta_base`; half the
/// frames carry a real effect, half none.
pub fn calibrate(estimators: &[EstimatorKind], cfg: &ValidateConfig) -> Calibration {
    let mut entries = BTreeMap::new();
    for k in estimators {
        let (mut tp, mut fp, mut pos) = (0usize, 0usize, 0usize);
        for i in 0..2 * FRAMES_PER_ARM {
            let real = i < FRAMES_PER_ARM;
            let (frame, _) = gen_causal_frame(FRAME_ROWS, if real { EFFECT } else { 0.0 }, CONFOUNDING, 0xCA11_0000 + i);
            let significant = k
                .estimate(&frame)
                .map(|e| p_value(e.effect, e.stderr) < cfg.theta_base)
                .unwrap_or(false);
            if real {
                pos += 1;
            }
            match (significant, real) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / pos as f64;
        entries.insert(k.as_str().to_string(), CalibrationEntry { precision, recall });
    }
    Calibration { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_is_cached_and_sane() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.json");
        let cfg = ValidateConfig::default();
        let a = Calibration::load_or_compute(&path, &cfg).unwrap();
        assert!(path.exists());
        let b = Calibration::load_or_compute(&path, &cfg).unwrap();
        assert_eq!(a, b);
        for k in EstimatorKind::ALL {
            let e = a.get(k.as_str());
            assert!((0.0..=1.0).contains(&e.precision) && (0.0..=1.0).contains(&e.recall));
        }
        // the adjusted estimator is unbiased under confounding
        let reg = a.get("regression_adjusted");
        assert!(reg.precision >= 0.8 && reg.recall >= 0.8, "{reg:?}");
        assert_eq!(Calibration::neutral().get("x").recall, 0.5);
    }
}
