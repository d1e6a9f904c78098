//! Event loading, fixed-width activity binning and coarse run context.
//!
//! Events are read from JSON-lines or CSV, binned per user into half-open
//! `[start, end)` windows and summarised into a [`PipelineContext`] whose
//! `bucket_key` indexes the parameter memory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bin width in seconds (5 minutes).
pub const DEFAULT_BIN_WIDTH: i64 = 300;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error("invalid window: end {end} must be greater than start {start}")]
    InvalidWindow { start: i64, end: i64 },
    #[error("invalid bin width {0}")]
    InvalidBinWidth(i64),
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionType {
    Post,
    Retweet,
    Mention,
    Reply,
    Other,
}

impl std::str::FromStr for ActionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "post" => Ok(ActionType::Post),
            "retweet" => Ok(ActionType::Retweet),
            "mention" => Ok(ActionType::Mention),
            "reply" => Ok(ActionType::Reply),
            "other" => Ok(ActionType::Other),
            other => Err(format!("unknown action_type {other:?}")),
        }
    }
}

/// One raw user action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub timestamp: i64,
    pub action_type: ActionType,
    #[serde(default)]
    pub hashtags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_user: Option<String>,
}

impl EventRecord {
    fn check(&self) -> Result<(), String> {
        if self.user_id.is_empty() {
            return Err("empty user_id".into());
        }
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        if let Some(s) = self.sentiment {
            if !(-1.0..=1.0).contains(&s) {
                return Err(format!("sentiment {s} outside [-1, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Jsonl,
    Csv,
}

impl EventFormat {
    /// Guess from a file extension; anything that is not `.csv` is jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Jsonl,
        }
    }
}

/// Reads events in file order. Row numbers in errors are 1-based lines
/// (for CSV the header is line 1).
pub fn load_events(path: &Path, format: EventFormat) -> Result<Vec<EventRecord>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    match format {
        EventFormat::Jsonl => parse_jsonl(BufReader::new(file)),
        EventFormat::Csv => parse_csv(file),
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<EventRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|e| IngestError::Parse {
            row,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            row,
            reason: e.to_string(),
        })?;
        rec.check().map_err(|reason| IngestError::Parse { row, reason })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user_id: String,
    timestamp: i64,
    action_type: String,
    #[serde(default)]
    hashtags: String,
    #[serde(default)]
    sentiment: Option<f64>,
    #[serde(default)]
    target_user: Option<String>,
}

pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<Vec<EventRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (idx, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header occupies line 1
        let line = idx + 2;
        let row = row.map_err(|e| IngestError::Parse {
            row: line,
            reason: e.to_string(),
        })?;
        let action_type = row
            .action_type
            .parse()
            .map_err(|reason| IngestError::Parse { row: line, reason })?;
        let hashtags = row
            .hashtags
            .split('|')
            .map(str::trim)
            .filter(|h| !h.is_empty())
            .map(String::from)
            .collect();
        let rec = EventRecord {
            user_id: row.user_id,
            timestamp: row.timestamp,
            action_type,
            hashtags,
            sentiment: row.sentiment,
            target_user: row.target_user.filter(|t| !t.is_empty()),
        };
        rec.check().map_err(|reason| IngestError::Parse { row: line, reason })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes events as jsonl, one record per line.
pub fn write_events_jsonl<W: Write>(events: &[EventRecord], mut w: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-user event counts on a fixed grid of bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySeries {
    pub user_id: String,
    pub window_start: i64,
    pub window_end: i64,
    pub bin_width: i64,
    pub values: Vec<f64>,
}

impl ActivitySeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Builds a series directly from values, on a unit grid starting at 0.
    pub fn from_values(user_id: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len() as i64;
        ActivitySeries {
            user_id: user_id.into(),
            window_start: 0,
            window_end: n.max(1),
            bin_width: 1,
            values,
        }
    }
}

/// Half-open observation window `[start, end)` in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self, IngestError> {
        if end <= start {
            return Err(IngestError::InvalidWindow { start, end });
        }
        Ok(Window { start, end })
    }

    pub fn span(&self) -> i64 {
        self.end - self.start
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts < self.end
    }

    pub fn bin_count(&self, bin_width: i64) -> usize {
        ((self.span() + bin_width - 1) / bin_width) as usize
    }

    /// Smallest window covering every event (end is exclusive, so last + 1).
    pub fn covering(events: &[EventRecord]) -> Option<Self> {
        let min = events.iter().map(|e| e.timestamp).min()?;
        let max = events.iter().map(|e| e.timestamp).max()?;
        Some(Window {
            start: min,
            end: max + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedActivity {
    /// Ordered by user id.
    pub series: BTreeMap<String, ActivitySeries>,
    /// Events that fell outside the window.
    pub dropped: usize,
}

/// Counts events per user per bin. Every user seen in `events` gets a
/// series, even when all of their events fall outside the window.
pub fn bin_activity(
    events: &[EventRecord],
    window: Window,
    bin_width: i64,
) -> Result<BinnedActivity, IngestError> {
    if window.end <= window.start {
        return Err(IngestError::InvalidWindow {
            start: window.start,
            end: window.end,
        });
    }
    if bin_width <= 0 {
        return Err(IngestError::InvalidBinWidth(bin_width));
    }
    let n_bins = window.bin_count(bin_width);
    let mut series: BTreeMap<String, ActivitySeries> = BTreeMap::new();
    let mut dropped = 0;
    for e in events {
        let s = series
            .entry(e.user_id.clone())
            .or_insert_with(|| ActivitySeries {
                user_id: e.user_id.clone(),
                window_start: window.start,
                window_end: window.end,
                bin_width,
                values: vec![0.0; n_bins],
            });
        if window.contains(e.timestamp) {
            let bin = ((e.timestamp - window.start) / bin_width) as usize;
            s.values[bin] += 1.0;
        } else {
            dropped += 1;
        }
    }
    Ok(BinnedActivity { series, dropped })
}

/// Warns when the grid is too short for the largest embedding in the grid.
pub fn check_series_length(n_bins: usize, max_dim: usize, max_delay: usize) -> bool {
    let needed = max_dim * max_delay + 10;
    if n_bins < needed {
        log::warn!("window yields {n_bins} bins, fewer than the {needed} the embedding grid wants");
        false
    } else {
        true
    }
}

/// Coarse description of one detection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineContext {
    pub user_count: usize,
    pub mean_activity: f64,
    pub window_span: i64,
    pub bucket_key: String,
}

pub fn extract_context(
    series: &BTreeMap<String, ActivitySeries>,
) -> Result<PipelineContext, IngestError> {
    let first = series.values().next().ok_or(IngestError::EmptyInput)?;
    let user_count = series.len();
    let mean_activity = series.values().map(ActivitySeries::total).sum::<f64>() / user_count as f64;
    let window_span = first.window_end - first.window_start;
    Ok(PipelineContext {
        user_count,
        mean_activity,
        window_span,
        bucket_key: bucket_key(user_count, mean_activity, window_span),
    })
}

pub(crate) fn floor_log2(x: f64) -> i64 {
    if x <= 0.0 {
        // keeps the key defined for degenerate inputs
        i64::MIN / 2
    } else {
        x.log2().floor() as i64
    }
}

/// `u{⌊log2 U⌋}-a{⌊log2(1+ā)⌋}-s{⌊log2(hours+1)⌋}`.
pub fn bucket_key(user_count: usize, mean_activity: f64, span_seconds: i64) -> String {
    let hours = span_seconds as f64 / 3600.0;
    format!(
        "u{}-a{}-s{}",
        floor_log2(user_count as f64),
        floor_log2(1.0 + mean_activity),
        floor_log2(hours + 1.0)
    )
}

/// Debug dump of series as jsonl.
pub fn write_series_jsonl<'a, W, I>(series: I, mut w: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ActivitySeries>,
{
    for s in series {
        let line = serde_json::json!({
            "user_id": s.user_id,
            "window": [s.window_start, s.window_end],
            "bin_width": s.bin_width,
            "values": s.values,
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
