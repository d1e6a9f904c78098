//! Label-queue HTTP service for the annotation front end.
//!
//! All label mutations go through one mutex-guarded [`LabelStore`], so
//! concurrent posts serialize and each gets its own revision. Retraining
//! runs on a blocking worker against a snapshot of the human labels; a
//! busy flag rejects overlapping requests with 409.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use accd_core::classify::{
    harvest_pseudo_labels, next_queries, CurriculumLog, FeatureVector, LabelSource, LabelStore, TreeEnsemble,
    UserClass, FEATURE_NAMES,
};
use accd_core::config::Config;
use accd_core::pipeline::{train_classifier, unlabelled_pool, STORE_MODEL};

pub const DEFAULT_QUEUE_LEN: usize = 20;
pub const MAX_QUEUE_LEN: usize = 1000;

/// Outcome of the latest retrain.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainStatus {
    pub val_accuracy: Option<f64>,
    pub curriculum: Option<CurriculumLog>,
    pub pseudo_added: usize,
    pub last_error: Option<String>,
    pub completed_retrains: u64,
}

struct Shared {
    cfg: Config,
    store_dir: Option<PathBuf>,
    features: Vec<FeatureVector>,
    index: BTreeMap<String, usize>,
    labels: Mutex<LabelStore>,
    model: RwLock<Option<TreeEnsemble>>,
    status: Mutex<TrainStatus>,
    busy: AtomicBool,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// `store_dir`, when set, receives the retrained model file.
    pub fn new(
        cfg: Config,
        store_dir: Option<PathBuf>,
        features: Vec<FeatureVector>,
        labels: LabelStore,
        model: Option<TreeEnsemble>,
    ) -> Self {
        let index = features.iter().enumerate().map(|(i, f)| (f.user_id.clone(), i)).collect();
        let model = model.filter(|m| features.first().is_none_or(|f| m.check_width(&f.values).is_ok()));
        AppState(Arc::new(Shared {
            cfg,
            store_dir,
            features,
            index,
            labels: Mutex::new(labels),
            model: RwLock::new(model),
            status: Mutex::new(TrainStatus::default()),
            busy: AtomicBool::new(false),
        }))
    }

    pub fn is_retraining(&self) -> bool {
        self.0.busy.load(Ordering::SeqCst)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/labels", post(post_label))
        .route("/api/retrain", post(retrain))
        .route("/api/progress", get(progress))
        .route("/api/health", get(health))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn allowed_labels() -> Vec<&'static str> {
    UserClass::ALL.iter().map(|c| c.as_str()).collect()
}

/// `n` from the query string; absent means the default.
fn queue_len(query: Option<&str>) -> Result<usize, String> {
    let raw = query
        .unwrap_or("")
        .split('&')
        .find_map(|kv| kv.strip_prefix("n="));
    match raw {
        None => Ok(DEFAULT_QUEUE_LEN),
        Some(v) => v
            .parse::<usize>()
            .map(|n| n.min(MAX_QUEUE_LEN))
            .map_err(|_| format!("n must be a non-negative integer, got {v:?}")),
    }
}

#[derive(Debug, Serialize)]
struct QueueItem {
    user_id: String,
    uncertainty: f64,
    /// Vote fractions per class; absent without a model.
    votes: Option<BTreeMap<&'static str, f64>>,
    predicted: Option<UserClass>,
    features: BTreeMap<&'static str, f64>,
    status: &'static str,
    /// Pseudo-label currently held, if any.
    pseudo_label: Option<UserClass>,
}

fn feature_map(fv: &FeatureVector) -> BTreeMap<&'static str, f64> {
    FEATURE_NAMES.iter().copied().zip(fv.values.iter().copied()).collect()
}

async fn queue(State(state): State<AppState>, RawQuery(query): RawQuery) -> Response {
    let n = match queue_len(query.as_deref()) {
        Ok(n) => n,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let s = &state.0;
    let pool = {
        let labels = s.labels.lock().expect("label lock");
        unlabelled_pool(&s.features, &labels)
            .into_iter()
            .map(|fv| {
                let pseudo = labels.get(&fv.user_id).map(|r| r.label);
                (fv, pseudo)
            })
            .collect::<Vec<_>>()
    };
    let model = s.model.read().expect("model lock");
    let total_pending = pool.len();
    let pseudo: BTreeMap<String, Option<UserClass>> = pool.iter().map(|(f, p)| (f.user_id.clone(), *p)).collect();
    let items: Vec<QueueItem> = match model.as_ref() {
        Some(m) => {
            let fvs: Vec<FeatureVector> = pool.into_iter().map(|(f, _)| f).collect();
            let ranked = match next_queries(m, &fvs, n) {
                Ok(r) => r,
                Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            };
            ranked
                .into_iter()
                .map(|q| {
                    let p = m.predict_proba(&q.features.values);
                    QueueItem {
                        votes: Some(UserClass::ALL.iter().map(|c| c.as_str()).zip(p).collect()),
                        predicted: Some(m.predict(&q.features.values)),
                        features: feature_map(&q.features),
                        pseudo_label: pseudo.get(&q.user_id).copied().flatten(),
                        uncertainty: q.uncertainty,
                        user_id: q.user_id,
                        status: "pending",
                    }
                })
                .collect()
        }
        // no model yet: every user sits at the uniform-vote maximum
        None => pool
            .into_iter()
            .take(n)
            .map(|(fv, pseudo_label)| QueueItem {
                user_id: fv.user_id.clone(),
                uncertainty: 0.75,
                votes: None,
                predicted: None,
                features: feature_map(&fv),
                status: "pending",
                pseudo_label,
            })
            .collect(),
    };
    Json(json!({
        "model_version": model.as_ref().map(|m| m.version()),
        "total_pending": total_pending,
        "items": items,
    }))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    user_id: String,
    label: String,
}

async fn post_label(State(state): State<AppState>, body: Bytes) -> Response {
    let body: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({
                    "error": format!("malformed body: {e}"),
                    "allowed": allowed_labels(),
                })),
            )
                .into_response()
        }
    };
    let Ok(label) = body.label.parse::<UserClass>() else {
        return (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({
                "error": format!("unknown label {:?}", body.label),
                "allowed": allowed_labels(),
            })),
        )
            .into_response();
    };
    let s = &state.0;
    if !s.index.contains_key(&body.user_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown user {:?}", body.user_id));
    }
    let result = {
        let mut labels = s.labels.lock().expect("label lock");
        labels.set_human(&body.user_id, label)
    };
    match result {
        Ok((rec, written)) => Json(json!({
            "user_id": rec.user,
            "label": rec.label,
            "revision": rec.revision,
            "written": written,
        }))
        .into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Clears the busy flag however the worker exits.
struct BusyGuard(AppState);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0 .0.busy.store(false, Ordering::SeqCst);
    }
}

fn retrain_blocking(state: &AppState) -> Result<Option<String>, String> {
    let s = &state.0;
    let snapshot = {
        let labels = s.labels.lock().expect("label lock");
        let mut snap = LabelStore::in_memory();
        for r in labels.records().filter(|r| r.source == LabelSource::Human) {
            snap.set_human(&r.user, r.label).map_err(|e| e.to_string())?;
        }
        snap
    };
    let trained = train_classifier(&s.features, &snapshot, &s.cfg.classify, s.cfg.seed).map_err(|e| e.to_string())?;
    let trained = match trained {
        Ok(t) => t,
        Err(why) => return Ok(Some(why)),
    };
    if let Some(dir) = &s.store_dir {
        let path = dir.join(STORE_MODEL);
        let mut buf = Vec::new();
        trained.model.write_to(&mut buf).map_err(|e| e.to_string())?;
        std::fs::write(&path, buf).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let pseudo_added = {
        let mut labels = s.labels.lock().expect("label lock");
        let pool = unlabelled_pool(&s.features, &labels);
        harvest_pseudo_labels(&trained.model, &pool, &mut labels).map_err(|e| e.to_string())?
    };
    *s.model.write().expect("model lock") = Some(trained.model);
    let mut status = s.status.lock().expect("status lock");
    status.val_accuracy = trained.val_accuracy;
    status.curriculum = Some(trained.log);
    status.pseudo_added = pseudo_added;
    Ok(None)
}

async fn retrain(State(state): State<AppState>) -> Response {
    if state.0.busy.swap(true, Ordering::SeqCst) {
        return error(StatusCode::CONFLICT, "retrain already running");
    }
    let guard = BusyGuard(state.clone());
    let human = state.0.labels.lock().expect("label lock").count(LabelSource::Human);
    tokio::task::spawn_blocking(move || {
        let outcome = retrain_blocking(&guard.0);
        let mut status = guard.0 .0.status.lock().expect("status lock");
        status.completed_retrains += 1;
        status.last_error = match outcome {
            Ok(None) => None,
            Ok(Some(why)) => Some(format!("not trained: {why}")),
            Err(e) => Some(e),
        };
        if let Some(e) = &status.last_error {
            log::warn!("retrain: {e}");
        }
        drop(status);
        drop(guard);
    });
    (
        StatusCode::ACCEPTED,
        Json(json!({ "status": "started", "human_labels": human })),
    )
        .into_response()
}

/// 1-based index of the last curriculum stage that trained a model.
fn curriculum_stage(log: &CurriculumLog) -> Option<usize> {
    use accd_core::classify::StageOutcome;
    log.stages
        .iter()
        .rposition(|st| matches!(st.outcome, StageOutcome::GatePassed | StageOutcome::PatienceExhausted))
        .map(|i| i + 1)
}

async fn progress(State(state): State<AppState>) -> Response {
    let s = &state.0;
    let (human, pseudo, revision) = {
        let labels = s.labels.lock().expect("label lock");
        (labels.count(LabelSource::Human), labels.count(LabelSource::Pseudo), labels.revision())
    };
    let status = s.status.lock().expect("status lock").clone();
    let model_version = s.model.read().expect("model lock").as_ref().map(|m| m.version());
    Json(json!({
        "users": s.features.len(),
        "labels": { "human": human, "pseudo": pseudo },
        "revision": revision,
        "val_accuracy": status.val_accuracy,
        "gate": s.cfg.classify.gate,
        "curriculum_stage": status.curriculum.as_ref().and_then(curriculum_stage),
        "curriculum": status.curriculum,
        "pseudo_added": status.pseudo_added,
        "retraining": state.is_retraining(),
        "completed_retrains": status.completed_retrains,
        "model_version": model_version,
        "last_error": status.last_error,
    }))
    .into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "users": state.0.features.len(),
        "model_loaded": state.0.model.read().expect("model lock").is_some(),
    }))
    .into_response()
}
