//! Multi-stage behaviour through the public API: stores that persist
//! across runs, the classifier round trip, and ingest invariants.

use std::io::Cursor;

use proptest::prelude::*;

use accd_core::classify::{extract_all, LabelSource, TreeEnsemble, UserClass};
use accd_core::config::Config;
use accd_core::ingest::{bin_activity, parse_jsonl, write_events_jsonl, ActionType, EventRecord, Window};
use accd_core::pipeline::{run_detection, run_id, train_classifier, unlabelled_pool, Stores};
use accd_core::synthgen::{gen_campaign, CampaignSpec, CampaignTruth};

fn campaign(seed: u64) -> (Vec<EventRecord>, CampaignTruth) {
    gen_campaign(&CampaignSpec {
        n_background: 30,
        n_coordinated: 5,
        seed,
        ..CampaignSpec::default()
    })
}

#[test]
fn store_state_carries_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::default();
    let (events, _) = campaign(11);

    let first = {
        let mut stores = Stores::open(dir.path(), &cfg).unwrap();
        run_detection(&events, &cfg, &mut stores).unwrap()
    };
    assert!(first.memory_update.is_some());

    let mut stores = Stores::open(dir.path(), &cfg).unwrap();
    let records = stores.params.records();
    assert_eq!(records.len(), 1);
    let (e, tau) = first.chosen_params.unwrap();
    assert_eq!((records[0].embedding_dim, records[0].delay), (e, tau));
    assert_eq!(records[0].usage_count, 1);
    // one case per estimator per evaluated pair
    let per_pair = cfg.validate.estimators.len();
    assert_eq!(stores.history.len(), first.evaluations.len() * per_pair);

    // the reopened store changes the run identity, not the inputs
    let second_id = run_id(&events, &cfg, &stores);
    assert_ne!(second_id, first.run_id);
    let second = run_detection(&events, &cfg, &mut stores).unwrap();
    assert_eq!(second.run_id, second_id);
    assert_eq!(stores.history.len(), (first.evaluations.len() + second.evaluations.len()) * per_pair);
}

#[test]
fn identical_inputs_give_identical_runs() {
    let cfg = Config { seed: 5, ..Config::default() };
    let (events, _) = campaign(12);
    let a = run_detection(&events, &cfg, &mut Stores::in_memory(&cfg)).unwrap();
    let b = run_detection(&events, &cfg, &mut Stores::in_memory(&cfg)).unwrap();
    assert_eq!(
        serde_json::to_string(&a.validated_pairs).unwrap(),
        serde_json::to_string(&b.validated_pairs).unwrap()
    );
    assert_eq!(a.candidate_edges, b.candidate_edges);
    assert_eq!(a.run_id, b.run_id);
}

#[test]
fn trained_model_survives_serialization() {
    let (events, truth) = campaign(13);
    let window = Window::new(truth.window.0, truth.window.1).unwrap();
    let features = extract_all(&events, window, truth.bin_width);
    let cfg = Config::default();
    let mut stores = Stores::in_memory(&cfg);
    let coordinated: Vec<&String> = truth.leader.iter().chain(&truth.followers).collect();
    let mut others = 0;
    for fv in &features {
        if coordinated.contains(&&fv.user_id) {
            stores.labels.set_human(&fv.user_id, UserClass::Fake).unwrap();
        } else if others < 12 {
            stores.labels.set_human(&fv.user_id, UserClass::Individual).unwrap();
            others += 1;
        }
    }
    assert_eq!(stores.labels.count(LabelSource::Human), 17);

    let trained = train_classifier(&features, &stores.labels, &cfg.classify, cfg.seed)
        .unwrap()
        .expect("enough labels to train");
    assert_eq!(trained.train_size + trained.val_size, 17);

    let mut buf = Vec::new();
    trained.model.write_to(&mut buf).unwrap();
    let loaded = TreeEnsemble::read_from(Cursor::new(buf)).unwrap();
    assert_eq!(loaded.version(), trained.model.version());
    let pool = unlabelled_pool(&features, &stores.labels);
    assert_eq!(pool.len(), features.len() - 17);
    for fv in &pool {
        assert_eq!(loaded.predict_proba(&fv.values), trained.model.predict_proba(&fv.values));
    }
}

#[test]
fn too_few_labels_is_a_reason_not_an_error() {
    let (events, truth) = campaign(14);
    let window = Window::new(truth.window.0, truth.window.1).unwrap();
    let features = extract_all(&events, window, truth.bin_width);
    let cfg = Config::default();
    let mut stores = Stores::in_memory(&cfg);
    for fv in features.iter().take(12) {
        stores.labels.set_human(&fv.user_id, UserClass::Org).unwrap();
    }
    let why = train_classifier(&features, &stores.labels, &cfg.classify, 0).unwrap().unwrap_err();
    assert!(why.contains("1 classes"), "{why}");
}

fn event_strategy() -> impl Strategy<Value = EventRecord> {
    (0usize..6, 0i64..10_000, 0usize..5).prop_map(|(u, ts, a)| EventRecord {
        user_id: format!("u{u}"),
        timestamp: 1_000_000 + ts,
        action_type: [ActionType::Post, ActionType::Retweet, ActionType::Mention, ActionType::Reply, ActionType::Other][a],
        hashtags: Vec::new(),
        sentiment: None,
        target_user: None,
    })
}

proptest! {
    #[test]
    fn binning_conserves_events(
        events in prop::collection::vec(event_strategy(), 0..200),
        width in 1i64..2_000,
        start in 0i64..5_000,
        len in 1i64..8_000,
    ) {
        let window = Window::new(1_000_000 + start, 1_000_000 + start + len).unwrap();
        let binned = bin_activity(&events, window, width).unwrap();
        let counted: f64 = binned.series.values().map(|s| s.total()).sum();
        let inside = events.iter().filter(|e| window.contains(e.timestamp)).count();
        prop_assert_eq!(counted as usize, inside);
        prop_assert_eq!(binned.dropped, events.len() - inside);
        for s in binned.series.values() {
            prop_assert_eq!(s.len(), window.bin_count(width));
        }
    }

    #[test]
    fn jsonl_round_trips(events in prop::collection::vec(event_strategy(), 0..50)) {
        let mut buf = Vec::new();
        write_events_jsonl(&events, &mut buf).unwrap();
        let back = parse_jsonl(Cursor::new(buf)).unwrap();
        prop_assert_eq!(back, events);
    }
}
