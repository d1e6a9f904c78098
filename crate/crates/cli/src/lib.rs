//! The `accd` command line: every pipeline stage as a subcommand, plus
//! the label-queue HTTP service.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error (bad
//! input, failed stage, missing or tampered run), 3 internal error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use accd_core::classify::{extract_all, harvest_pseudo_labels, next_queries, LabelSource, UserClass};
use accd_core::config::Config;
use accd_core::ingest::{
    bin_activity, extract_context, load_events, write_events_jsonl, write_series_jsonl, EventFormat, EventRecord, Window,
};
use accd_core::pipeline::{
    bench_stage1, detect_to_dir, evaluate_pair, replay, run_dir, run_id, train_classifier, unlabelled_pool,
    PipelineError, Stores, EDGES_FILE, EFFECTS_FILE,
};
use accd_core::synthgen::{
    gen_campaign, gen_causal_frame, gen_coupled_logistic, gen_population, CampaignSpec, PopulationSpec,
};
use accd_core::validate::PairCausalFrame;

pub mod server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e) => e,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "accd", version, about = "Causal coordination detection over user activity")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store directory for parameter memory, labels, history and runs.
    #[arg(long, global = true, default_value = ".accd")]
    pub store: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and bin events; print a summary.
    Ingest(IngestArgs),
    /// Full detection run into a run directory.
    Detect(DetectArgs),
    /// Train the account classifier from stored human labels.
    Classify(ClassifyArgs),
    /// Ensemble validation of a single pair or frame.
    Validate(ValidateArgs),
    /// Write synthetic data with ground truth.
    Synth(SynthArgs),
    /// Clustered against naive Stage-1 cost.
    Bench(BenchArgs),
    /// Serve the label-queue API.
    Serve(ServeArgs),
    /// Verify and print a persisted run.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct EventsArg {
    /// Event file (jsonl or csv).
    #[arg(long)]
    pub events: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: EventsArg,
    #[arg(long)]
    pub bin_width: Option<i64>,
    /// Write binned series as jsonl here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: EventsArg,
    /// Run directory; defaults to `<store>/runs/run_<id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<i64>,
    /// Cluster count for pair scheduling.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub cross_fraction: Option<f64>,
    #[arg(long)]
    pub influence_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: EventsArg,
    /// Human labels to add first, jsonl lines of `{"user_id", "label"}`.
    #[arg(long)]
    pub import_labels: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<i64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// A frame as written by `synth frame`.
    #[arg(long, conflicts_with_all = ["events", "source", "target"])]
    pub frame: Option<PathBuf>,
    #[arg(long, requires_all = ["source", "target"])]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub bin_width: Option<i64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(subcommand)]
    pub kind: SynthKind,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Background users plus one leader/follower group.
    Campaign {
        #[arg(long, default_value_t = 200)]
        background: usize,
        #[arg(long, default_value_t = 10)]
        coordinated: usize,
        #[arg(long, default_value_t = 1)]
        lag: usize,
        #[arg(long, default_value_t = 288)]
        bins: usize,
    },
    /// Two coupled logistic maps.
    Coupled {
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        coupling: f64,
    },
    /// A treatment-effect frame with a known effect.
    Frame {
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 2.0)]
        effect: f64,
        #[arg(long, default_value_t = 1.0)]
        confounding: f64,
    },
    /// Population of equally sized behaviour archetypes.
    Population {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long, default_value_t = 576)]
        bins: usize,
    },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark on these events instead of a generated population.
    #[arg(long, conflicts_with = "users")]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long)]
    pub cross_fraction: Option<f64>,
    /// Bins of generated activity.
    #[arg(long, default_value_t = 576)]
    pub bins: usize,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Build the user pool from these events; otherwise the pool saved by
    /// the last `detect` or `classify` is used.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<i64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run directory or run id inside the store.
    pub run: String,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

pub fn execute(cli: &Cli) -> CmdResult {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Ingest(a) => ingest(a, cfg),
        Command::Detect(a) => detect(a, cfg, &cli.store),
        Command::Classify(a) => classify(a, cfg, &cli.store),
        Command::Validate(a) => validate(a, cfg, &cli.store),
        Command::Synth(a) => synth(a, &cfg),
        Command::Bench(a) => bench(a, cfg),
        Command::Serve(a) => serve(a, cfg, &cli.store),
        Command::Replay(a) => replay_cmd(a, &cli.store),
    }
}

/// Defaults, overlaid by the file when given.
pub fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .usage()?;
    Config::from_toml(&text)
        .map_err(|e| anyhow!("config {}: {e}", path.display()))
        .usage()
}

fn checked(cfg: Config) -> Result<Config, Failure> {
    cfg.check().map_err(|e| anyhow!("invalid setting: {e}")).usage()?;
    Ok(cfg)
}

fn read_events(input: &EventsArg) -> Result<Vec<EventRecord>, Failure> {
    read_events_from(&input.events, input.format)
}

fn read_events_from(path: &Path, format: Option<FormatArg>) -> Result<Vec<EventRecord>, Failure> {
    let format = match format {
        Some(FormatArg::Jsonl) => EventFormat::Jsonl,
        Some(FormatArg::Csv) => EventFormat::Csv,
        None => EventFormat::from_path(path),
    };
    load_events(path, format)
        .with_context(|| format!("loading {}", path.display()))
        .data()
}

/// Configured window, or the span of the events.
fn window_for(events: &[EventRecord], cfg: &Config) -> Result<Option<Window>, Failure> {
    let cover = Window::covering(events);
    let w = match (cfg.ingest.window_start, cfg.ingest.window_end, cover) {
        (Some(s), Some(e), _) => Window::new(s, e),
        (s, e, Some(c)) => Window::new(s.unwrap_or(c.start), e.unwrap_or(c.end)),
        (_, _, None) => return Ok(None),
    };
    w.map(Some).usage()
}

fn print_json<T: Serialize>(value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).internal()?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Internal(e.into())),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let body = serde_json::to_string_pretty(value).internal()? + "\n";
    fs::write(path, body)
        .with_context(|| format!("writing {}", path.display()))
        .data()
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .data()
}

fn ingest(a: &IngestArgs, mut cfg: Config) -> CmdResult {
    if let Some(bw) = a.bin_width {
        cfg.ingest.bin_width = bw;
    }
    let cfg = checked(cfg)?;
    let events = read_events(&a.input)?;
    let Some(window) = window_for(&events, &cfg)? else {
        return Err(Failure::Data(anyhow!("{} holds no events", a.input.events.display())));
    };
    let binned = bin_activity(&events, window, cfg.ingest.bin_width).data()?;
    let context = extract_context(&binned.series).data()?;
    if let Some(out) = &a.out {
        let f = fs::File::create(out)
            .with_context(|| format!("creating {}", out.display()))
            .data()?;
        write_series_jsonl(binned.series.values(), BufWriter::new(f)).data()?;
    }
    print_json(&json!({
        "events": events.len(),
        "users": binned.series.len(),
        "dropped_events": binned.dropped,
        "window": [window.start, window.end],
        "bin_width": cfg.ingest.bin_width,
        "bins": window.bin_count(cfg.ingest.bin_width),
        "context": context,
    }))
}

fn open_stores(store: &Path, cfg: &Config) -> Result<Stores, Failure> {
    Stores::open(store, cfg)
        .with_context(|| format!("opening store {}", store.display()))
        .data()
}

fn detect(a: &DetectArgs, mut cfg: Config, store: &Path) -> CmdResult {
    if let Some(bw) = a.bin_width {
        cfg.ingest.bin_width = bw;
    }
    if let Some(k) = a.clusters {
        cfg.cluster.k = Some(k);
    }
    if let Some(f) = a.cross_fraction {
        cfg.cluster.cross_fraction = f;
    }
    if let Some(f) = a.influence_floor {
        cfg.ccm.influence_floor = f;
    }
    let cfg = checked(cfg)?;
    let events = read_events(&a.input)?;
    let mut stores = open_stores(store, &cfg)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => run_dir(store, &run_id(&events, &cfg, &stores)),
    };
    let run = detect_to_dir(&events, &cfg, &mut stores, &dir).map_err(|e| {
        if e.partial().is_some() {
            eprintln!("partial report written to {}", dir.display());
        }
        Failure::from(e)
    })?;
    print_json(&json!({
        "run_id": run.run_id,
        "run_dir": dir,
        "status": run.status,
        "chosen_params": run.chosen_params,
        "candidates": run.candidate_edges.len(),
        "validated": run.validated_pairs.len(),
        "classification": {
            "trained": run.classification.trained,
            "note": run.classification.note,
            "pseudo_added": run.classification.pseudo_added,
        },
        "metrics": run.metrics,
        "files": [EDGES_FILE, EFFECTS_FILE],
    }))
}

#[derive(Debug, Deserialize)]
struct ImportedLabel {
    user_id: String,
    label: String,
}

fn import_labels(path: &Path, stores: &mut Stores) -> Result<usize, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()?;
    let mut written = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ImportedLabel = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .data()?;
        let label: UserClass = rec
            .label
            .parse()
            .map_err(|e: String| anyhow!("{}:{}: {e}", path.display(), i + 1))
            .data()?;
        if stores.labels.set_human(&rec.user_id, label).data()?.1 {
            written += 1;
        }
    }
    Ok(written)
}

fn classify(a: &ClassifyArgs, mut cfg: Config, store: &Path) -> CmdResult {
    if let Some(bw) = a.bin_width {
        cfg.ingest.bin_width = bw;
    }
    let cfg = checked(cfg)?;
    let events = read_events(&a.input)?;
    let mut stores = open_stores(store, &cfg)?;
    let imported = match &a.import_labels {
        Some(p) => import_labels(p, &mut stores)?,
        None => 0,
    };
    let Some(window) = window_for(&events, &cfg)? else {
        return Err(Failure::Data(anyhow!("{} holds no events", a.input.events.display())));
    };
    let features = extract_all(&events, window, cfg.ingest.bin_width);
    stores.save_features(&features).data()?;
    let trained = train_classifier(&features, &stores.labels, &cfg.classify, cfg.seed).data()?;
    let mut summary = json!({
        "users": features.len(),
        "imported_labels": imported,
        "human_labels": stores.labels.count(LabelSource::Human),
    });
    let model = match trained {
        Ok(t) => {
            stores.save_model(&t.model).data()?;
            let pool = unlabelled_pool(&features, &stores.labels);
            let pseudo = harvest_pseudo_labels(&t.model, &pool, &mut stores.labels).data()?;
            summary["trained"] = json!(true);
            summary["train_size"] = json!(t.train_size);
            summary["val_size"] = json!(t.val_size);
            summary["val_accuracy"] = json!(t.val_accuracy);
            summary["curriculum"] = json!(t.log);
            summary["pseudo_added"] = json!(pseudo);
            summary["model_version"] = json!(t.model.version());
            Some(t.model)
        }
        Err(why) => {
            summary["trained"] = json!(false);
            summary["note"] = json!(why);
            None
        }
    };
    if let Some(m) = &model {
        let pool = unlabelled_pool(&features, &stores.labels);
        let queue = next_queries(m, &pool, cfg.classify.queue_size).data()?;
        summary["queue"] = json!(queue.iter().map(|q| &q.user_id).collect::<Vec<_>>());
        let predictions: Vec<_> = features
            .iter()
            .filter(|f| !f.empty)
            .map(|f| {
                let p = m.predict_proba(&f.values);
                json!({
                    "user_id": f.user_id,
                    "label": m.predict(&f.values),
                    "confidence": p.iter().copied().fold(0.0, f64::max),
                })
            })
            .collect();
        summary["predictions"] = json!(predictions);
    }
    print_json(&summary)
}

fn validate(a: &ValidateArgs, mut cfg: Config, store: &Path) -> CmdResult {
    if let Some(bw) = a.bin_width {
        cfg.ingest.bin_width = bw;
    }
    let cfg = checked(cfg)?;
    let frame: PairCausalFrame = match (&a.frame, &a.events, &a.source, &a.target) {
        (Some(path), ..) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .data()?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing frame {}", path.display()))
                .data()?
        }
        (None, Some(events), Some(source), Some(target)) => {
            let events = read_events_from(events, None)?;
            let Some(window) = window_for(&events, &cfg)? else {
                return Err(Failure::Data(anyhow!("no events")));
            };
            let binned = bin_activity(&events, window, cfg.ingest.bin_width).data()?;
            let series = |u: &str| {
                binned
                    .series
                    .get(u)
                    .map(|s| s.values.clone())
                    .ok_or_else(|| Failure::Data(anyhow!("user {u} has no events")))
            };
            PairCausalFrame::from_pair(source, target, &series(source)?, &series(target)?)
        }
        _ => return Err(Failure::Usage(anyhow!("give --frame, or --events with --source and --target"))),
    };
    let stores = open_stores(store, &cfg)?;
    // read-only: a one-off validation is not a run outcome; the missing
    // influence serializes as null
    let (eval, _) = evaluate_pair(&frame, f64::NAN, 0, &cfg, &stores.history, &stores.calibration);
    if let Some(err) = &eval.error {
        return Err(Failure::Data(anyhow!("validation failed: {err}")));
    }
    let mut out = serde_json::to_value(&eval).internal()?;
    out["rows"] = json!(frame.len());
    print_json(&out)
}

fn write_events(path: &Path, events: &[EventRecord]) -> CmdResult {
    let f = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .data()?;
    write_events_jsonl(events, BufWriter::new(f)).data()
}

fn synth(a: &SynthArgs, cfg: &Config) -> CmdResult {
    create_dir(&a.out)?;
    let seed = cfg.seed;
    let events_path = a.out.join("events.jsonl");
    let truth_path = a.out.join("truth.json");
    let summary = match &a.kind {
        SynthKind::Campaign { background, coordinated, lag, bins } => {
            let spec = CampaignSpec {
                n_background: *background,
                n_coordinated: *coordinated,
                lag_bins: *lag,
                n_bins: *bins,
                seed,
                ..CampaignSpec::default()
            };
            let (events, truth) = gen_campaign(&spec);
            write_events(&events_path, &events)?;
            write_json(&truth_path, &json!({ "spec": spec, "truth": truth }))?;
            json!({ "events": events.len(), "planted_pairs": truth.planted_pairs.len() })
        }
        SynthKind::Coupled { steps, coupling } => {
            let (x, y, direction) = gen_coupled_logistic(*steps, *coupling, seed);
            let path = a.out.join("series.jsonl");
            let f = fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))
                .data()?;
            write_series_jsonl([&x, &y], BufWriter::new(f)).data()?;
            write_json(&truth_path, &json!({ "coupling": coupling, "direction": direction, "seed": seed }))?;
            json!({ "steps": steps, "direction": direction })
        }
        SynthKind::Frame { rows, effect, confounding } => {
            let (frame, truth) = gen_causal_frame(*rows, *effect, *confounding, seed);
            write_json(&a.out.join("frame.json"), &frame)?;
            write_json(&truth_path, &truth)?;
            json!({ "rows": frame.len(), "treated": frame.treated_count() })
        }
        SynthKind::Population { users, groups, bins } => {
            let spec = PopulationSpec {
                n_users: *users,
                n_groups: *groups,
                n_bins: *bins,
                seed,
                ..PopulationSpec::default()
            };
            let (events, membership) = gen_population(&spec);
            write_events(&events_path, &events)?;
            let groups: serde_json::Map<String, serde_json::Value> =
                membership.into_iter().map(|(u, g)| (u, json!(g))).collect();
            write_json(&truth_path, &json!({ "spec": spec, "groups": groups }))?;
            json!({ "events": events.len(), "users": users })
        }
    };
    print_json(&json!({ "out": a.out, "summary": summary }))
}

fn bench(a: &BenchArgs, mut cfg: Config) -> CmdResult {
    cfg.cluster.k = Some(a.clusters);
    if let Some(f) = a.cross_fraction {
        cfg.cluster.cross_fraction = f;
    }
    let cfg = checked(cfg)?;
    let events = match &a.events {
        Some(p) => read_events_from(p, None)?,
        None => {
            let spec = PopulationSpec {
                n_users: a.users.unwrap_or(1000),
                n_groups: a.clusters,
                n_bins: a.bins,
                bin_width: cfg.ingest.bin_width,
                seed: cfg.seed,
                ..PopulationSpec::default()
            };
            gen_population(&spec).0
        }
    };
    let report = bench_stage1(&events, &cfg)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn serve(a: &ServeArgs, mut cfg: Config, store: &Path) -> CmdResult {
    if let Some(bw) = a.bin_width {
        cfg.ingest.bin_width = bw;
    }
    let cfg = checked(cfg)?;
    let stores = open_stores(store, &cfg)?;
    let features = match &a.events {
        Some(p) => {
            let events = read_events_from(p, None)?;
            let Some(window) = window_for(&events, &cfg)? else {
                return Err(Failure::Data(anyhow!("{} holds no events", p.display())));
            };
            let f = extract_all(&events, window, cfg.ingest.bin_width);
            stores.save_features(&f).data()?;
            f
        }
        None => stores.load_features().data()?,
    };
    if features.is_empty() {
        return Err(Failure::Data(anyhow!(
            "no users to serve; pass --events or run detect/classify against this store first"
        )));
    }
    let model = stores.load_model().data()?;
    let state = server::AppState::new(cfg, stores.dir.clone(), features, stores.labels, model);
    let runtime = tokio::runtime::Runtime::new().internal()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))
            .data()?;
        let addr = listener.local_addr().internal()?;
        eprintln!("serving label API on http://{addr}/api/");
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .internal()
    })
}

fn replay_cmd(a: &ReplayArgs, store: &Path) -> CmdResult {
    let as_path = PathBuf::from(&a.run);
    let dir = if as_path.is_dir() { as_path } else { run_dir(store, &a.run) };
    let run = replay(&dir)?;
    print_json(&json!({
        "run_id": run.run_id,
        "run_dir": dir,
        "status": run.status,
        "verified": true,
        "candidates": run.candidate_edges.len(),
        "validated": run.validated_pairs.len(),
        "validated_pairs": run.validated_pairs.iter().map(|p| [&p.source, &p.target]).collect::<Vec<_>>(),
        "metrics": run.metrics,
    }))
}
