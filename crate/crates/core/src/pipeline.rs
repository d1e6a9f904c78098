//! One detection run over a batch of events: cross-mapping candidates
//! (Stage 1), account classification (Stage 2) and validated pairs
//! (Stage 3), followed by the parameter-memory update. Runs persist to a
//! directory with a checksummed manifest and can be replayed from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ccm::{CcmEngine, InfluenceEdge};
use crate::classify::{
    curriculum_train, extract_all, harvest_pseudo_labels, next_queries, ClassifyError, CurriculumLog, FeatureVector,
    LabelSource, LabelStore, TreeEnsemble, UserClass,
};
use crate::cluster::{agglomerate, all_pairs, compute_stats, default_k, schedule_pairs};
use crate::config::{ClassifySection, Config};
use crate::embed::RollingEmbedder;
use crate::ingest::{bin_activity, check_series_length, extract_context, EventRecord, PipelineContext, Window};
use crate::journal::{io_err, StoreError};
use crate::memory::{select_params, ParamPair, ParamStore};
use crate::validate::{
    ensemble_validate, record_outcome, refute, Calibration, DatasetProfile, EffectReport, EnsembleOutcome,
    EstimatorKind, HistoryStore, PairCausalFrame, Verdict, RefutationKind, Estimator,
};

pub const REPORT_FILE: &str = "report.json";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const EFFECTS_FILE: &str = "effects.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// File names inside a store directory.
pub const STORE_LABELS: &str = "labels.jsonl";
pub const STORE_MODEL: &str = "model.forest";
pub const STORE_FEATURES: &str = "features.jsonl";
const RUN_FILES: [&str; 4] = [REPORT_FILE, EDGES_FILE, EFFECTS_FILE, LABELS_FILE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Detect,
    Classify,
    Validate,
    Memory,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Detect => "detect",
            Stage::Classify => "classify",
            Stage::Validate => "validate",
            Stage::Memory => "memory",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    /// A stage failed; `partial` holds whatever the run produced before it.
    #[error("{stage} stage failed: {message}")]
    Stage {
        stage: Stage,
        message: String,
        partial: Box<DetectionRun>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("run not found: {0}")]
    NotFound(String),
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    pub fn partial(&self) -> Option<&DetectionRun> {
        match self {
            PipelineError::Stage { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Persistent stores for one store directory.
pub struct Stores {
    pub dir: Option<PathBuf>,
    pub params: ParamStore,
    pub labels: LabelStore,
    pub history: HistoryStore,
    pub calibration: Calibration,
}

impl Stores {
    pub fn open(dir: &Path, cfg: &Config) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Stores {
            dir: Some(dir.to_path_buf()),
            params: ParamStore::open(&dir.join("params"))?,
            labels: LabelStore::open(&dir.join(STORE_LABELS))?,
            history: HistoryStore::open(&dir.join("history.jsonl"))?,
            calibration: Calibration::load_or_compute(&dir.join("calibration.json"), &cfg.validate)?,
        })
    }

    pub fn in_memory(cfg: &Config) -> Self {
        Stores {
            dir: None,
            params: ParamStore::in_memory(),
            labels: LabelStore::in_memory(),
            history: HistoryStore::in_memory(),
            calibration: crate::validate::calibrate(&cfg.validate.estimators, &cfg.validate),
        }
    }

    pub fn model_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(STORE_MODEL))
    }

    pub fn features_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(STORE_FEATURES))
    }

    pub fn load_model(&self) -> Result<Option<TreeEnsemble>, ClassifyError> {
        match self.model_path() {
            Some(p) if p.exists() => {
                let f = fs::File::open(&p).map_err(io_err(&p)).map_err(ClassifyError::Store)?;
                TreeEnsemble::read_from(std::io::BufReader::new(f)).map(Some)
            }
            _ => Ok(None),
        }
    }

    pub fn save_model(&self, model: &TreeEnsemble) -> Result<(), ClassifyError> {
        if let Some(p) = self.model_path() {
            let mut buf = Vec::new();
            model.write_to(&mut buf)?;
            fs::write(&p, buf).map_err(io_err(&p)).map_err(ClassifyError::Store)?;
        }
        Ok(())
    }

    /// Pins the feature pool used by the label service.
    pub fn save_features(&self, features: &[FeatureVector]) -> Result<(), StoreError> {
        if let Some(p) = self.features_path() {
            let mut out = String::new();
            for fv in features {
                out.push_str(&serde_json::to_string(fv)?);
                out.push('\n');
            }
            fs::write(&p, out).map_err(io_err(&p))?;
        }
        Ok(())
    }

    pub fn load_features(&self) -> Result<Vec<FeatureVector>, StoreError> {
        match self.features_path() {
            Some(p) if p.exists() => crate::journal::replay(&p),
            _ => Ok(Vec::new()),
        }
    }

    fn fingerprint(&self) -> String {
        let params = serde_json::to_string(&self.params.records()).expect("records serialize");
        format!("{params}|{}|{}", self.history.len(), self.labels.revision())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: Stage, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub ingest_ms: f64,
    pub detect_ms: f64,
    pub classify_ms: f64,
    pub validate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub events: usize,
    pub dropped_events: usize,
    pub users: usize,
    /// Users with at least one in-window event; only these enter Stage 1.
    pub active_users: usize,
    pub clusters: usize,
    pub naive_pairs: usize,
    pub scheduled_pairs: usize,
    pub within_pairs: usize,
    pub cross_pairs: usize,
    pub degenerate_pairs: usize,
    pub knn_queries: u64,
    pub candidates: usize,
    pub validated: usize,
    /// `validated / candidates`, 0 without candidates.
    pub precision_proxy: f64,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedPair {
    pub source: String,
    pub target: String,
    pub report: EffectReport,
}

/// Stage-3 result for one candidate edge; one line of `effects.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub source: String,
    pub target: String,
    pub influence: f64,
    pub profile_key: Option<String>,
    pub threshold: Option<f64>,
    /// Ensemble estimate; refutation verdicts come from the top-scoring
    /// member and are attached here.
    pub ensemble: Option<EffectReport>,
    pub members: Vec<EffectReport>,
    pub significant: bool,
    pub ci_overlap: bool,
    pub refuted: bool,
    pub validated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Class annotation for a user that appears on a candidate edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLabel {
    pub user_id: String,
    pub label: UserClass,
    /// `human`, `pseudo` or `model`.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub trained: bool,
    pub note: String,
    pub human_labels: usize,
    pub pseudo_added: usize,
    pub model_version: Option<String>,
    pub val_accuracy: Option<f64>,
    pub curriculum: Option<CurriculumLog>,
    /// Most uncertain unlabeled users, for the annotation queue.
    pub queue: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUpdate {
    pub bucket: String,
    pub params: ParamPair,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub run_id: String,
    pub status: RunStatus,
    pub context: Option<PipelineContext>,
    pub chosen_params: Option<ParamPair>,
    pub candidate_edges: Vec<InfluenceEdge>,
    pub validated_pairs: Vec<ValidatedPair>,
    pub evaluations: Vec<PairEvaluation>,
    pub classification: ClassificationSummary,
    pub user_labels: Vec<UserLabel>,
    pub memory_update: Option<MemoryUpdate>,
    pub metrics: RunMetrics,
}

impl DetectionRun {
    fn empty(run_id: String) -> Self {
        DetectionRun {
            run_id,
            status: RunStatus::Complete,
            context: None,
            chosen_params: None,
            candidate_edges: Vec::new(),
            validated_pairs: Vec::new(),
            evaluations: Vec::new(),
            classification: ClassificationSummary::default(),
            user_labels: Vec::new(),
            memory_update: None,
            metrics: RunMetrics::default(),
        }
    }
}

/// Per-run scratch state: cluster statistics and the cross-mapping engine
/// with its neighbour-table and skill caches. Dropped when the run ends.
struct ShortTermMemory {
    series: BTreeMap<String, Vec<f64>>,
    engine: Option<CcmEngine>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// Deterministic run id from the inputs, config and store state.
pub fn run_id(events: &[EventRecord], cfg: &Config, stores: &Stores) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(serde_json::to_vec(e).expect("event serializes"));
        h.update(b"\n");
    }
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(stores.fingerprint().as_bytes());
    hex::encode(&h.finalize()[..6])
}

fn stage_err(stage: Stage, message: impl ToString, mut partial: DetectionRun) -> PipelineError {
    let message = message.to_string();
    partial.status = RunStatus::Failed {
        stage,
        message: message.clone(),
    };
    PipelineError::Stage {
        stage,
        message,
        partial: Box::new(partial),
    }
}

/// Seed for one refutation of one pair.
fn refute_seed(seed: u64, pair: usize, test: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((pair as u64) << 8)
        .wrapping_add(test as u64)
}

/// Executes Stage 1, 2 and 3 in order, then feeds the validated count
/// back into the parameter memory.
pub fn run_detection(events: &[EventRecord], cfg: &Config, stores: &mut Stores) -> Result<DetectionRun, PipelineError> {
    cfg.check().map_err(PipelineError::Config)?;
    let total = Instant::now();
    let mut run = DetectionRun::empty(run_id(events, cfg, stores));
    run.metrics.events = events.len();

    // ingest
    let t = Instant::now();
    let window = match (cfg.ingest.window_start, cfg.ingest.window_end, Window::covering(events)) {
        (Some(s), Some(e), _) => Window::new(s, e).map_err(|e| stage_err(Stage::Ingest, e, run.clone()))?,
        (s, e, Some(cover)) => Window::new(s.unwrap_or(cover.start), e.unwrap_or(cover.end))
            .map_err(|e| stage_err(Stage::Ingest, e, run.clone()))?,
        (_, _, None) => {
            run.metrics.timings.total_ms = ms(total);
            return Ok(run);
        }
    };
    let bw = cfg.ingest.bin_width;
    let binned = bin_activity(events, window, bw).map_err(|e| stage_err(Stage::Ingest, e, run.clone()))?;
    run.metrics.dropped_events = binned.dropped;
    run.metrics.users = binned.series.len();
    let context = extract_context(&binned.series).map_err(|e| stage_err(Stage::Ingest, e, run.clone()))?;
    run.context = Some(context.clone());
    let in_window: Vec<EventRecord> = events.iter().filter(|e| window.contains(e.timestamp)).cloned().collect();
    run.metrics.timings.ingest_ms = ms(t);

    // Stage 1
    let t = Instant::now();
    let params = select_params(&context.bucket_key, &cfg.memory, &stores.params);
    run.chosen_params = Some(params);
    let stm = stage1(&binned.series, &in_window, params, cfg, true, &mut run).map_err(|e| stage_err(Stage::Detect, e, run.clone()))?;
    run.metrics.timings.detect_ms = ms(t);

    // Stage 2
    let t = Instant::now();
    let features = extract_all(events, window, bw);
    stores.save_features(&features).map_err(|e| stage_err(Stage::Classify, e, run.clone()))?;
    let model = stage2(&features, cfg, stores, &mut run).map_err(|e| stage_err(Stage::Classify, e, run.clone()))?;
    run.user_labels = annotate(&run.candidate_edges, &features, &stores.labels, model.as_ref());
    run.metrics.timings.classify_ms = ms(t);

    // Stage 3
    let t = Instant::now();
    let outcomes = stage3(&stm, cfg, stores, &mut run);
    for (eval, outcome) in run.evaluations.iter().zip(&outcomes) {
        if let Some(o) = outcome {
            record_outcome(&mut stores.history, o, eval.validated)
                .map_err(|e| stage_err(Stage::Validate, e, run.clone()))?;
        }
    }
    run.metrics.timings.validate_ms = ms(t);

    // memory feedback, once per run and only with candidates
    let candidates = run.candidate_edges.len() as u64;
    if candidates > 0 {
        let validated = run.validated_pairs.len() as u64;
        stores
            .params
            .update_precision(&context.bucket_key, params, validated, candidates)
            .map_err(|e| stage_err(Stage::Memory, e, run.clone()))?;
        run.memory_update = Some(MemoryUpdate {
            bucket: context.bucket_key.clone(),
            params,
            correct: validated,
            total: candidates,
        });
    }
    run.metrics.timings.total_ms = ms(total);
    Ok(run)
}

fn stage1(
    series: &BTreeMap<String, crate::ingest::ActivitySeries>,
    events: &[EventRecord],
    (dim, delay): ParamPair,
    cfg: &Config,
    clustered: bool,
    run: &mut DetectionRun,
) -> Result<ShortTermMemory, String> {
    let active: Vec<&crate::ingest::ActivitySeries> = series.values().filter(|s| s.total() > 0.0).collect();
    run.metrics.active_users = active.len();
    let mut stm = ShortTermMemory {
        series: active.iter().map(|s| (s.user_id.clone(), s.values.clone())).collect(),
        engine: None,
    };
    if active.len() < 2 {
        return Ok(stm);
    }
    if let Some(first) = active.first() {
        check_series_length(first.len(), cfg.memory.max_dim(), cfg.memory.max_delay());
    }

    let schedule = if clustered {
        let mut times: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
        for e in events {
            times.entry(e.user_id.as_str()).or_default().push(e.timestamp);
        }
        let stats: Vec<_> = active
            .par_iter()
            .map(|s| {
                let mut ts = times.get(s.user_id.as_str()).cloned().unwrap_or_default();
                ts.sort_unstable();
                compute_stats(s, &ts)
            })
            .collect();
        let k = cfg.cluster.k.unwrap_or_else(|| default_k(active.len())).min(active.len());
        let assignment = agglomerate(&stats, k).map_err(|e| e.to_string())?;
        run.metrics.clusters = assignment.k;
        schedule_pairs(&assignment, cfg.cluster.cross_fraction, cfg.seed).map_err(|e| e.to_string())?
    } else {
        let users: Vec<String> = active.iter().map(|s| s.user_id.clone()).collect();
        run.metrics.clusters = 1;
        all_pairs(&users)
    };
    run.metrics.naive_pairs = schedule.naive_count();
    run.metrics.scheduled_pairs = schedule.pairs.len();
    run.metrics.within_pairs = schedule.within;
    run.metrics.cross_pairs = schedule.cross;

    let ordered: Vec<crate::ingest::ActivitySeries> = schedule.users.iter().map(|u| series[u].clone()).collect();
    let manifolds = ordered
        .par_iter()
        .map(|s| RollingEmbedder::embed_all(&s.user_id, &s.values, dim, delay))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let engine = CcmEngine::new(ordered, manifolds, dim, delay, cfg.ccm.crossmap()).map_err(|e| e.to_string())?;
    let scored = engine.score_pairs(&schedule.pairs);
    let mut candidates = Vec::new();
    for edge in scored {
        let edge = edge.map_err(|e| e.to_string())?;
        if edge.degenerate {
            run.metrics.degenerate_pairs += 1;
        } else if edge.score >= cfg.ccm.influence_floor {
            candidates.push(edge);
        }
    }
    candidates.sort_by(|a, b| (&a.source, &a.target).cmp(&(&b.source, &b.target)));
    run.metrics.knn_queries = engine.knn_queries();
    run.metrics.candidates = candidates.len();
    run.candidate_edges = candidates;
    stm.engine = Some(engine);
    Ok(stm)
}

/// Outcome of training from the current human labels.
#[derive(Debug)]
pub struct TrainedClassifier {
    pub model: TreeEnsemble,
    pub log: CurriculumLog,
    pub val_accuracy: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

/// Curriculum training on the human-labelled users in `features`. Every
/// fifth labelled user (in id order) is held out for validation. Returns
/// `Ok(None)` with the reason when there are too few labels.
pub fn train_classifier(
    features: &[FeatureVector],
    labels: &LabelStore,
    cfg: &ClassifySection,
    seed: u64,
) -> Result<Result<TrainedClassifier, String>, ClassifyError> {
    let labelled: Vec<(&FeatureVector, UserClass)> = features
        .iter()
        .filter_map(|fv| {
            labels
                .get(&fv.user_id)
                .filter(|r| r.source == LabelSource::Human)
                .map(|r| (fv, r.label))
        })
        .collect();
    let classes: BTreeSet<UserClass> = labelled.iter().map(|(_, c)| *c).collect();
    if labelled.len() < cfg.min_labels.max(10) || classes.len() < 2 {
        return Ok(Err(format!(
            "{} human labels across {} classes; need {} across at least 2",
            labelled.len(),
            classes.len(),
            cfg.min_labels.max(10)
        )));
    }
    let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (fv, c)) in labelled.iter().enumerate() {
        if i % 5 == 4 {
            vx.push(fv.values.clone());
            vy.push(*c);
        } else {
            tx.push(fv.values.clone());
            ty.push(*c);
        }
    }
    let (model, log) = curriculum_train(&tx, &ty, &vx, &vy, &cfg.curriculum(seed))?;
    let val_accuracy = log.stages.iter().rev().find_map(|s| s.val_accuracy);
    Ok(Ok(TrainedClassifier {
        model,
        log,
        val_accuracy,
        train_size: tx.len(),
        val_size: vx.len(),
    }))
}

/// Users without a human label, the pool for queries and pseudo-labels.
pub fn unlabelled_pool(features: &[FeatureVector], labels: &LabelStore) -> Vec<FeatureVector> {
    features
        .iter()
        .filter(|fv| !fv.empty && labels.get(&fv.user_id).is_none_or(|r| r.source != LabelSource::Human))
        .cloned()
        .collect()
}

fn stage2(features: &[FeatureVector], cfg: &Config, stores: &mut Stores, run: &mut DetectionRun) -> Result<Option<TreeEnsemble>, ClassifyError> {
    let summary = &mut run.classification;
    summary.human_labels = stores.labels.count(LabelSource::Human);
    let model = match train_classifier(features, &stores.labels, &cfg.classify, cfg.seed)? {
        Ok(trained) => {
            summary.trained = true;
            summary.note = format!("trained on {} labels, validated on {}", trained.train_size, trained.val_size);
            summary.val_accuracy = trained.val_accuracy;
            summary.curriculum = Some(trained.log);
            stores.save_model(&trained.model)?;
            let pool = unlabelled_pool(features, &stores.labels);
            summary.pseudo_added = harvest_pseudo_labels(&trained.model, &pool, &mut stores.labels)?;
            Some(trained.model)
        }
        Err(why) => {
            log::info!("classification skipped: {why}");
            summary.note = format!("skipped: {why}");
            stores.load_model()?.filter(|m| m.check_width(&[0.0; crate::classify::FEATURE_COUNT]).is_ok())
        }
    };
    if let Some(m) = &model {
        summary.model_version = Some(m.version());
        let pool = unlabelled_pool(features, &stores.labels);
        summary.queue = next_queries(m, &pool, cfg.classify.queue_size)?
            .into_iter()
            .map(|q| q.user_id)
            .collect();
    }
    Ok(model)
}

fn annotate(edges: &[InfluenceEdge], features: &[FeatureVector], labels: &LabelStore, model: Option<&TreeEnsemble>) -> Vec<UserLabel> {
    let users: BTreeSet<&str> = edges.iter().flat_map(|e| [e.source.as_str(), e.target.as_str()]).collect();
    let by_user: BTreeMap<&str, &FeatureVector> = features.iter().map(|f| (f.user_id.as_str(), f)).collect();
    users
        .into_iter()
        .filter_map(|u| {
            if let Some(r) = labels.get(u) {
                let source = match r.source {
                    LabelSource::Human => "human",
                    LabelSource::Pseudo => "pseudo",
                };
                return Some(UserLabel {
                    user_id: u.to_string(),
                    label: r.label,
                    source: source.into(),
                    confidence: None,
                });
            }
            let (m, fv) = (model?, by_user.get(u)?);
            let p = m.predict_proba(&fv.values);
            Some(UserLabel {
                user_id: u.to_string(),
                label: m.predict(&fv.values),
                source: "model".into(),
                confidence: Some(p.iter().copied().fold(0.0, f64::max)),
            })
        })
        .collect()
}

/// Ensemble validation plus the three refutations for one pair. `index`
/// picks the refutation seeds, so each pair of a run draws its own.
pub fn evaluate_pair(
    frame: &PairCausalFrame,
    influence: f64,
    index: usize,
    cfg: &Config,
    history: &HistoryStore,
    calibration: &Calibration,
) -> (PairEvaluation, Option<EnsembleOutcome>) {
    let estimators: Vec<&dyn Estimator> = cfg.validate.estimators.iter().map(|k| k as &dyn Estimator).collect();
    let z = cfg.validate.z();
    let mut eval = PairEvaluation {
        source: frame.source.clone(),
        target: frame.target.clone(),
        influence,
        profile_key: None,
        threshold: None,
        ensemble: None,
        members: Vec::new(),
        significant: false,
        ci_overlap: false,
        refuted: false,
        validated: false,
        error: None,
    };
    let profile = DatasetProfile::of_frame(frame, cfg.ingest.bin_width);
    eval.profile_key = Some(profile.profile_key.clone());
    let outcome = match ensemble_validate(frame, &estimators, &profile, history, calibration, &cfg.validate) {
        Ok(o) => o,
        Err(e) => {
            eval.error = Some(e.to_string());
            return (eval, None);
        }
    };
    eval.threshold = Some(outcome.threshold);
    eval.significant = outcome.significant;
    eval.ci_overlap = outcome.ci_overlap;
    let mut ensemble = outcome.ensemble.clone();
    let top = outcome.top();
    let mut all_pass = true;
    if let Ok(kind) = top.estimator.parse::<EstimatorKind>() {
        for (j, test) in RefutationKind::ALL.into_iter().enumerate() {
            let verdict = match refute(frame, &kind, top, test, z, refute_seed(cfg.seed, index, j)) {
                Ok(r) => r.verdict,
                Err(e) => {
                    log::debug!("{} -> {}: {} errored: {e}", frame.source, frame.target, test.as_str());
                    Verdict::Fail
                }
            };
            all_pass &= verdict == Verdict::Pass;
            ensemble.refutations.insert(test.as_str().to_string(), verdict);
        }
    } else {
        all_pass = false;
    }
    eval.refuted = !all_pass;
    eval.validated = outcome.validated && all_pass;
    eval.ensemble = Some(ensemble);
    eval.members = outcome.members.clone();
    (eval, Some(outcome))
}

fn stage3(stm: &ShortTermMemory, cfg: &Config, stores: &Stores, run: &mut DetectionRun) -> Vec<Option<EnsembleOutcome>> {
    // every pair sees the history as of run start
    let results: Vec<(PairEvaluation, Option<EnsembleOutcome>)> = run
        .candidate_edges
        .par_iter()
        .enumerate()
        .map(|(i, edge)| {
            let frame = PairCausalFrame::from_pair(&edge.source, &edge.target, &stm.series[&edge.source], &stm.series[&edge.target]);
            evaluate_pair(&frame, edge.score, i, cfg, &stores.history, &stores.calibration)
        })
        .collect();
    let (evals, outcomes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    run.validated_pairs = evals
        .iter()
        .filter(|e| e.validated)
        .map(|e| ValidatedPair {
            source: e.source.clone(),
            target: e.target.clone(),
            report: e.ensemble.clone().expect("validated pairs have an estimate"),
        })
        .collect();
    run.metrics.validated = run.validated_pairs.len();
    run.metrics.precision_proxy = if run.candidate_edges.is_empty() {
        0.0
    } else {
        run.validated_pairs.len() as f64 / run.candidate_edges.len() as f64
    };
    run.evaluations = evals;
    outcomes
}

/// Stage-1 cost of clustered scheduling against naive all-pairs
/// cross-mapping on the same events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub users: usize,
    pub clusters: usize,
    pub cross_fraction: f64,
    pub params: ParamPair,
    pub naive_pairs: usize,
    pub scheduled_pairs: usize,
    pub within_pairs: usize,
    pub cross_pairs: usize,
    /// `scheduled_pairs / naive_pairs`.
    pub pair_ratio: f64,
    pub naive_candidates: usize,
    pub clustered_candidates: usize,
    pub naive_ms: f64,
    pub clustered_ms: f64,
    /// `naive_ms / clustered_ms`.
    pub speedup: f64,
}

/// Times Stage 1 (binning through candidate gating) both ways with the
/// same `(E, τ)`: memory-selected for the events' context.
pub fn bench_stage1(events: &[EventRecord], cfg: &Config) -> Result<BenchReport, PipelineError> {
    cfg.check().map_err(PipelineError::Config)?;
    let window = match (cfg.ingest.window_start, cfg.ingest.window_end, Window::covering(events)) {
        (Some(s), Some(e), _) => Window::new(s, e),
        (s, e, Some(c)) => Window::new(s.unwrap_or(c.start), e.unwrap_or(c.end)),
        _ => return Err(PipelineError::Config("no events to bench".into())),
    }
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    let timed = |clustered: bool| -> Result<(DetectionRun, f64), PipelineError> {
        let t = Instant::now();
        let mut run = DetectionRun::empty(String::new());
        let fail = |e: String, run: &DetectionRun| stage_err(Stage::Detect, e, run.clone());
        let binned = bin_activity(events, window, cfg.ingest.bin_width).map_err(|e| fail(e.to_string(), &run))?;
        let ctx = extract_context(&binned.series).map_err(|e| fail(e.to_string(), &run))?;
        let in_window: Vec<EventRecord> = events.iter().filter(|e| window.contains(e.timestamp)).cloned().collect();
        let params = select_params(&ctx.bucket_key, &cfg.memory, &ParamStore::in_memory());
        run.chosen_params = Some(params);
        stage1(&binned.series, &in_window, params, cfg, clustered, &mut run).map_err(|e| fail(e, &run))?;
        Ok((run, ms(t)))
    };
    let (naive, naive_ms) = timed(false)?;
    let (clustered, clustered_ms) = timed(true)?;
    let m = &clustered.metrics;
    Ok(BenchReport {
        users: m.active_users,
        clusters: m.clusters,
        cross_fraction: cfg.cluster.cross_fraction,
        params: clustered.chosen_params.unwrap_or((0, 0)),
        naive_pairs: naive.metrics.scheduled_pairs,
        scheduled_pairs: m.scheduled_pairs,
        within_pairs: m.within_pairs,
        cross_pairs: m.cross_pairs,
        pair_ratio: m.scheduled_pairs as f64 / naive.metrics.scheduled_pairs.max(1) as f64,
        naive_candidates: naive.metrics.candidates,
        clustered_candidates: m.candidates,
        naive_ms,
        clustered_ms,
        speedup: naive_ms / clustered_ms,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String, StoreError> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    /// File name → sha256 hex digest.
    pub files: BTreeMap<String, String>,
}

/// Writes the run directory: report, edges, effects, labels and the
/// checksum manifest (written last).
pub fn write_run(dir: &Path, run: &DetectionRun) -> Result<Manifest, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bodies = [
        (REPORT_FILE, serde_json::to_string_pretty(run)? + "\n"),
        (EDGES_FILE, jsonl(&run.candidate_edges)?),
        (EFFECTS_FILE, jsonl(&run.evaluations)?),
        (LABELS_FILE, jsonl(&run.user_labels)?),
    ];
    let mut files = BTreeMap::new();
    for (name, body) in bodies {
        let path = dir.join(name);
        fs::write(&path, &body).map_err(io_err(&path))?;
        files.insert(name.to_string(), sha256_hex(body.as_bytes()));
    }
    let manifest = Manifest {
        run_id: run.run_id.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Runs detection and persists the run directory. On a stage failure the
/// partial report is still written before the error is returned.
pub fn detect_to_dir(events: &[EventRecord], cfg: &Config, stores: &mut Stores, dir: &Path) -> Result<DetectionRun, PipelineError> {
    match run_detection(events, cfg, stores) {
        Ok(run) => {
            write_run(dir, &run)?;
            Ok(run)
        }
        Err(e) => {
            if let Some(partial) = e.partial() {
                write_run(dir, partial)?;
            }
            Err(e)
        }
    }
}

/// Directory of a run inside a store.
pub fn run_dir(store: &Path, run_id: &str) -> PathBuf {
    store.join("runs").join(format!("run_{run_id}"))
}

/// Reloads a persisted run after verifying every checksum in its manifest.
pub fn replay(dir: &Path) -> Result<DetectionRun, PipelineError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(PipelineError::NotFound(dir.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(io_err(&manifest_path))?)
        .map_err(StoreError::from)?;
    for name in RUN_FILES {
        let path = dir.join(name);
        let expected = manifest.files.get(name).ok_or_else(|| PipelineError::Checksum { file: name.into() })?;
        let body = fs::read(&path).map_err(|_| PipelineError::Checksum { file: name.into() })?;
        if &sha256_hex(&body) != expected {
            return Err(PipelineError::Checksum { file: name.into() });
        }
    }
    let body = fs::read(dir.join(REPORT_FILE)).map_err(io_err(&dir.join(REPORT_FILE)))?;
    let run: DetectionRun = serde_json::from_slice(&body).map_err(StoreError::from)?;
    if run.run_id != manifest.run_id {
        return Err(PipelineError::Checksum { file: MANIFEST_FILE.into() });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_campaign, CampaignSpec};

    fn small_campaign(seed: u64) -> Vec<EventRecord> {
        gen_campaign(&CampaignSpec {
            n_background: 30,
            n_coordinated: 5,
            seed,
            ..CampaignSpec::default()
        })
        .0
    }

    #[test]
    fn empty_events_give_empty_run_without_memory_update() {
        let cfg = Config::default();
        let mut stores = Stores::in_memory(&cfg);
        let run = run_detection(&[], &cfg, &mut stores).unwrap();
        assert!(run.candidate_edges.is_empty() && run.validated_pairs.is_empty());
        assert!(run.memory_update.is_none());
        assert!(stores.params.records().is_empty());
    }

    #[test]
    fn validated_subset_of_candidates_and_feedback_matches() {
        let cfg = Config::default();
        let mut stores = Stores::in_memory(&cfg);
        let run = run_detection(&small_campaign(1), &cfg, &mut stores).unwrap();
        let cands: BTreeSet<_> = run.candidate_edges.iter().map(|e| (&e.source, &e.target)).collect();
        for v in &run.validated_pairs {
            assert!(cands.contains(&(&v.source, &v.target)));
        }
        assert_eq!(run.evaluations.len(), run.candidate_edges.len());
        let upd = run.memory_update.as_ref().unwrap();
        assert_eq!(upd.correct as usize, run.validated_pairs.len());
        assert_eq!(upd.total as usize, run.candidate_edges.len());
        let t = &run.metrics.timings;
        assert!(t.ingest_ms >= 0.0 && t.detect_ms >= 0.0 && t.validate_ms >= 0.0);
        assert!(!run.classification.trained);
    }

    #[test]
    fn persisted_run_replays_and_detects_tampering() {
        let cfg = Config::default();
        let mut stores = Stores::in_memory(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let run = detect_to_dir(&small_campaign(2), &cfg, &mut stores, dir.path()).unwrap();
        assert_eq!(replay(dir.path()).unwrap(), run);

        let path = dir.path().join(EDGES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(replay(dir.path()), Err(PipelineError::Checksum { file }) if file == EDGES_FILE));
        assert!(matches!(replay(&dir.path().join("nope")), Err(PipelineError::NotFound(_))));
    }

    #[test]
    fn too_short_window_fails_with_partial_report() {
        let mut cfg = Config::default();
        // 20 bins cannot hold the library grid
        cfg.ingest.window_start = Some(1_600_000_200);
        cfg.ingest.window_end = Some(1_600_000_200 + 20 * 300);
        let mut stores = Stores::in_memory(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let err = detect_to_dir(&small_campaign(3), &cfg, &mut stores, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { stage: Stage::Detect, .. }), "{err}");
        let partial = replay(dir.path()).unwrap();
        assert!(matches!(partial.status, RunStatus::Failed { stage: Stage::Detect, .. }));
        assert!(partial.context.is_some());
        assert!(stores.params.records().is_empty());
    }
}
