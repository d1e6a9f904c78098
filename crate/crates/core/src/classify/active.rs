//! Simulated annotation loop comparing query strategies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, train, ClassifyError, ForestConfig, UserClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Uncertainty,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    pub initial: usize,
    pub batch: usize,
    pub target_accuracy: f64,
    pub forest: ForestConfig,
    pub seed: u64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        ActiveConfig {
            initial: 20,
            batch: 10,
            target_accuracy: 0.85,
            forest: ForestConfig::default(),
            seed: 0,
        }
    }
}

/// Labels revealed from `pool` until a model trained on them reaches the
/// target accuracy on the validation set. Both strategies start from the
/// same seeded random initial set. `None` if the pool runs out first.
pub fn labels_to_reach(
    pool_x: &[Vec<f64>],
    pool_y: &[UserClass],
    val_x: &[Vec<f64>],
    val_y: &[UserClass],
    strategy: SamplingStrategy,
    cfg: &ActiveConfig,
) -> Result<Option<usize>, ClassifyError> {
    let n = pool_x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labeled = vec![false; n];
    for i in sample(&mut rng, n, cfg.initial.min(n)) {
        labeled[i] = true;
    }
    let mut round = 0u64;
    loop {
        let idx: Vec<usize> = (0..n).filter(|&i| labeled[i]).collect();
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| pool_x[i].clone()).collect();
        let ys: Vec<UserClass> = idx.iter().map(|&i| pool_y[i]).collect();
        let forest = cfg.forest.clone().with_seed(cfg.forest.seed.wrapping_add(round));
        let model = match train(&xs, &ys, &forest) {
            Ok((m, _)) => Some(m),
            Err(ClassifyError::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(m) = &model {
            if accuracy(m, val_x, val_y) >= cfg.target_accuracy {
                return Ok(Some(idx.len()));
            }
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !labeled[i]).collect();
        if rest.is_empty() {
            return Ok(None);
        }
        let take = cfg.batch.min(rest.len());
        match (strategy, &model) {
            (SamplingStrategy::Uncertainty, Some(m)) => {
                let mut scored: Vec<(f64, usize)> = rest.iter().map(|&i| (m.uncertainty(&pool_x[i]), i)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(_, i) in &scored[..take] {
                    labeled[i] = true;
                }
            }
            _ => {
                for j in sample(&mut rng, rest.len(), take) {
                    labeled[rest[j]] = true;
                }
            }
        }
        round += 1;
    }
}
