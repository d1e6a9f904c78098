//! Run configuration, one TOML table per stage. Every key is optional;
//! missing keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::ccm::CrossMapConfig;
use crate::classify::{CurriculumConfig, ForestConfig};
use crate::ingest::DEFAULT_BIN_WIDTH;
use crate::memory::SelectionPolicy;
use crate::validate::ValidateConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub ingest: IngestSection,
    pub memory: SelectionPolicy,
    pub ccm: CcmSection,
    pub cluster: ClusterSection,
    pub classify: ClassifySection,
    pub validate: ValidateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            ingest: IngestSection::default(),
            memory: SelectionPolicy::default(),
            ccm: CcmSection::default(),
            cluster: ClusterSection::default(),
            classify: ClassifySection::default(),
            validate: ValidateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Seconds per bin.
    pub bin_width: i64,
    /// Window bounds in epoch seconds; both default to the span of the
    /// events (end exclusive).
    pub window_start: Option<i64>,
    pub window_end: Option<i64>,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            bin_width: DEFAULT_BIN_WIDTH,
            window_start: None,
            window_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcmSection {
    pub l_min: usize,
    pub l_max: usize,
    pub l_step: usize,
    /// Neighbours per prediction; defaults to `E + 1`.
    pub k_neighbors: Option<usize>,
    /// Temporal exclusion radius; defaults to `τ`.
    pub exclusion_radius: Option<usize>,
    /// Minimum influence score for a pair to become a candidate.
    pub influence_floor: f64,
}

impl Default for CcmSection {
    fn default() -> Self {
        let m = CrossMapConfig::default();
        CcmSection {
            l_min: m.l_min,
            l_max: m.l_max,
            l_step: m.l_step,
            k_neighbors: m.k_neighbors,
            exclusion_radius: m.exclusion_radius,
            influence_floor: 0.5,
        }
    }
}

impl CcmSection {
    pub fn crossmap(&self) -> CrossMapConfig {
        CrossMapConfig {
            l_min: self.l_min,
            l_max: self.l_max,
            l_step: self.l_step,
            k_neighbors: self.k_neighbors,
            exclusion_radius: self.exclusion_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Cluster count; defaults to `max(1, round(sqrt(U/10)))`.
    pub k: Option<usize>,
    pub cross_fraction: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            k: None,
            cross_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// Trees per ensemble (T).
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; defaults to `ceil(sqrt(F))`.
    pub max_features: Option<usize>,
    /// Curriculum uncertainty thresholds, ascending.
    pub thresholds: Vec<f64>,
    pub gate: f64,
    pub patience: usize,
    /// Human labels needed (across at least two classes) before training.
    pub min_labels: usize,
    /// Items kept in the label queue.
    pub queue_size: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let f = ForestConfig::default();
        let c = CurriculumConfig::default();
        ClassifySection {
            n_trees: f.n_trees,
            max_depth: f.max_depth,
            min_leaf: f.min_leaf,
            max_features: f.max_features,
            thresholds: c.thresholds,
            gate: c.gate,
            patience: c.patience,
            min_labels: 10,
            queue_size: 50,
        }
    }
}

impl ClassifySection {
    pub fn forest(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            max_features: self.max_features,
            seed,
        }
    }

    pub fn curriculum(&self, seed: u64) -> CurriculumConfig {
        CurriculumConfig {
            thresholds: self.thresholds.clone(),
            gate: self.gate,
            patience: self.patience,
            forest: self.forest(seed),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Range checks across all sections.
    pub fn check(&self) -> Result<(), String> {
        if self.ingest.bin_width <= 0 {
            return Err(format!("ingest.bin_width must be positive, got {}", self.ingest.bin_width));
        }
        if let (Some(s), Some(e)) = (self.ingest.window_start, self.ingest.window_end) {
            if e <= s {
                return Err(format!("ingest window end {e} must exceed start {s}"));
            }
        }
        self.memory.validate().map_err(|e| format!("memory: {e}"))?;
        self.ccm.crossmap().validate().map_err(|e| format!("ccm: {e}"))?;
        if !self.ccm.influence_floor.is_finite() {
            return Err("ccm.influence_floor must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.cluster.cross_fraction) {
            return Err(format!("cluster.cross_fraction {} outside [0, 1]", self.cluster.cross_fraction));
        }
        if self.cluster.k == Some(0) {
            return Err("cluster.k must be at least 1".into());
        }
        let c = &self.classify;
        if c.n_trees == 0 || c.max_depth == 0 || c.min_leaf == 0 {
            return Err("classify.n_trees, max_depth and min_leaf must be positive".into());
        }
        if c.thresholds.is_empty() || c.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err("classify.thresholds must be non-empty and ascending".into());
        }
        self.validate.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_tables_and_bad_values() {
        let cfg = Config::from_toml("seed = 7\n[memory]\nalpha = 0.5\n[cluster]\nk = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.memory.alpha, 0.5);
        assert_eq!(cfg.memory.beta, 0.1);
        assert_eq!(cfg.cluster.k, Some(3));
        assert!(Config::from_toml("[cluster]\ncross_fraction = 1.5\n").is_err());
        for table in ["ccm", "memory", "validate", "classify"] {
            assert!(Config::from_toml(&format!("[{table}]\nwat = 1\n")).is_err(), "{table}");
        }
        assert!(Config::from_toml("[ingest]\nbin_width = 0\n").is_err());
    }
}
