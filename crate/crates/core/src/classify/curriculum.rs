//! Staged training from easy to hard samples.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::forest::uncertainty_of;
use super::{accuracy, train, ClassifyError, ForestConfig, TrainReport, TreeEnsemble, UserClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub thresholds: Vec<f64>,
    /// Validation accuracy must exceed this to advance early.
    pub gate: f64,
    /// Retrain rounds per stage before advancing regardless.
    pub patience: usize,
    pub forest: ForestConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            thresholds: vec![0.3, 0.5, 0.7, 1.0],
            gate: 0.85,
            patience: 5,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    GatePassed,
    PatienceExhausted,
    /// No new samples over the previous stage; the previous model carries over.
    Unchanged,
    /// Too few samples or classes to train; skipped.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub threshold: f64,
    pub samples: usize,
    pub rounds: usize,
    pub val_accuracy: Option<f64>,
    pub outcome: StageOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurriculumLog {
    pub stages: Vec<StageEntry>,
}

impl CurriculumLog {
    pub fn effective_stages(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s.outcome, StageOutcome::GatePassed | StageOutcome::PatienceExhausted))
            .count()
    }
}

/// Per-sample difficulty: OOB vote fractions for rows the model trained
/// on (when available), full-ensemble votes otherwise.
fn difficulties(model: &TreeEnsemble, report: &TrainReport, members: &[usize], xs: &[Vec<f64>]) -> Vec<f64> {
    let mut d: Vec<f64> = xs.iter().map(|x| model.uncertainty(x)).collect();
    for (row, &i) in members.iter().enumerate() {
        if let Some(p) = report.oob_proba[row] {
            d[i] = uncertainty_of(&p);
        }
    }
    d
}

/// Trains through the difficulty thresholds in order. Each stage's set is
/// the previous set plus every sample whose difficulty under the previous
/// model is at most the threshold, so stage sizes never shrink.
pub fn curriculum_train(
    xs: &[Vec<f64>],
    ys: &[UserClass],
    val_x: &[Vec<f64>],
    val_y: &[UserClass],
    cfg: &CurriculumConfig,
) -> Result<(TreeEnsemble, CurriculumLog), ClassifyError> {
    let all: Vec<usize> = (0..xs.len()).collect();
    let (mut model, mut report) = train(xs, ys, &cfg.forest)?;
    let mut members = all;
    let mut difficulty = difficulties(&model, &report, &members, xs);
    let mut included: BTreeSet<usize> = BTreeSet::new();
    let mut trained_once = false;
    let mut log = CurriculumLog::default();

    for (s, &thr) in cfg.thresholds.iter().enumerate() {
        let before = included.len();
        included.extend((0..xs.len()).filter(|&i| difficulty[i] <= thr));
        if trained_once && included.len() == before {
            log.stages.push(StageEntry {
                threshold: thr,
                samples: included.len(),
                rounds: 0,
                val_accuracy: None,
                outcome: StageOutcome::Unchanged,
            });
            continue;
        }
        let idx: Vec<usize> = included.iter().copied().collect();
        let sx: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
        let sy: Vec<UserClass> = idx.iter().map(|&i| ys[i]).collect();
        let mut entry = StageEntry {
            threshold: thr,
            samples: idx.len(),
            rounds: 0,
            val_accuracy: None,
            outcome: StageOutcome::Empty,
        };
        for round in 0..cfg.patience.max(1) {
            let forest = cfg.forest.clone().with_seed(cfg.forest.seed.wrapping_add((s * 1000 + round) as u64));
            let (m, r) = match train(&sx, &sy, &forest) {
                Ok(v) => v,
                Err(ClassifyError::InsufficientData(why)) => {
                    log::warn!("curriculum stage {thr}: skipped ({why})");
                    break;
                }
                Err(e) => return Err(e),
            };
            let acc = accuracy(&m, val_x, val_y);
            entry.rounds = round + 1;
            entry.val_accuracy = Some(acc);
            model = m;
            report = r;
            members = idx.clone();
            trained_once = true;
            if acc > cfg.gate {
                entry.outcome = StageOutcome::GatePassed;
                break;
            }
            entry.outcome = StageOutcome::PatienceExhausted;
        }
        if entry.outcome == StageOutcome::PatienceExhausted {
            log::warn!(
                "curriculum stage {thr}: accuracy {:.3} not above {} after {} rounds; advancing",
                entry.val_accuracy.unwrap_or(0.0),
                cfg.gate,
                entry.rounds
            );
        }
        log.stages.push(entry);
        difficulty = difficulties(&model, &report, &members, xs);
    }
    if !trained_once {
        return Err(ClassifyError::InsufficientData("no curriculum stage could be trained".into()));
    }
    Ok((model, log))
}
