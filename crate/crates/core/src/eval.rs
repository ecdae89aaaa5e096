//! Benchmark harness: dataset loading, resumable batch runs, metrics, and
//! report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::PriceTable;
use crate::pipeline::{Pipeline, PipelineInput, PipelineResult, RunStatus, TraceWriter};
use crate::schema::{load_tables_json, DatabaseSchema, SchemaError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed questions file: {0}")]
    Format(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("sample #{index}: no schema for db_id `{db_id}`")]
    UnknownDb { index: usize, db_id: String },
    #[error("sample #{index}: database file {path} does not exist")]
    MissingDbFile { index: usize, path: String },
    #[error("no rows to aggregate")]
    EmptyRows,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Position in the questions file.
    pub index: usize,
    pub question: String,
    pub gold_query: String,
    pub db_id: String,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    question: String,
    query: String,
    db_id: String,
}

/// Window over the questions file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Slice {
    pub offset: usize,
    pub limit: Option<usize>,
}

/// Samples plus the schemas and database files they run against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub schemas: BTreeMap<String, Arc<DatabaseSchema>>,
    pub db_root: PathBuf,
}

/// Benchmark layout: `{db_root}/{db_id}/{db_id}.sqlite`.
pub fn db_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

impl Dataset {
    pub fn db_file(&self, db_id: &str) -> PathBuf {
        db_path(&self.db_root, db_id)
    }
}

/// Loads a questions file, resolving every sample's database. Sample order
/// follows the file; `slice` selects a window of it.
pub fn load_dataset(
    questions_file: impl AsRef<Path>,
    tables_file: impl AsRef<Path>,
    db_root: impl AsRef<Path>,
    slice: Slice,
) -> Result<Dataset, EvalError> {
    let qpath = questions_file.as_ref();
    let text = fs::read_to_string(qpath).map_err(io_err(qpath))?;
    let raw: Vec<RawSample> = serde_json::from_str(&text).map_err(|e| EvalError::Format(e.to_string()))?;
    let schemas: BTreeMap<String, Arc<DatabaseSchema>> =
        load_tables_json(tables_file)?.into_iter().map(|s| (s.db_id.clone(), Arc::new(s))).collect();
    let db_root = db_root.as_ref().to_path_buf();

    let end = match slice.limit {
        Some(n) => slice.offset.saturating_add(n).min(raw.len()),
        None => raw.len(),
    };
    let mut samples = Vec::new();
    let mut used = BTreeSet::new();
    for (index, r) in raw.into_iter().enumerate().take(end).skip(slice.offset) {
        if !schemas.contains_key(&r.db_id) {
            return Err(EvalError::UnknownDb { index, db_id: r.db_id });
        }
        let path = db_path(&db_root, &r.db_id);
        if !path.is_file() {
            return Err(EvalError::MissingDbFile { index, path: path.display().to_string() });
        }
        used.insert(r.db_id.clone());
        samples.push(Sample { index, question: r.question, gold_query: r.query, db_id: r.db_id });
    }
    let schemas = schemas.into_iter().filter(|(k, _)| used.contains(k)).collect();
    Ok(Dataset { samples, schemas, db_root })
}

// ---------------------------------------------------------------------------
// Rows and metrics
// ---------------------------------------------------------------------------

/// A non-negative quantity with two decimals, rounded half-up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fixed2(u64);

impl Fixed2 {
    /// `numerator / denominator * scale`, rounded half-up to hundredths.
    pub fn ratio(numerator: u64, denominator: u64, scale: u64) -> Self {
        assert!(denominator > 0, "ratio with zero denominator");
        let n = numerator as u128 * scale as u128 * 100;
        let d = denominator as u128;
        Self(((2 * n + d) / (2 * d)) as u64)
    }

    pub fn percent(count: u64, total: u64) -> Self {
        Self::ratio(count, total, 100)
    }

    pub fn hundredths(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Fixed2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Fixed2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Fixed2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_nan() || v < 0.0 {
            return Err(serde::de::Error::custom("negative fixed-point value"));
        }
        Ok(Self((v * 100.0).round() as u64))
    }
}

/// Per-sample result as stored in checkpoints and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub db_id: String,
    pub question: String,
    pub gold_sql: String,
    pub final_sql: Option<String>,
    pub ea: bool,
    pub valid: bool,
    pub attempts: u32,
    pub status: RunStatus,
    pub stage_error: bool,
    /// Normalized string equality with the gold query. Diagnostic only.
    pub exact_match: bool,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub tokens: u64,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn normalize_for_em(sql: &str) -> String {
    sql.trim().trim_end_matches(';').split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl SampleRow {
    fn from_result(sample: &Sample, result: &PipelineResult, prices: &PriceTable) -> Self {
        let stage_error = result.status() == RunStatus::StageError;
        let usage = result.trace.usage();
        let cost = result.trace.stages.iter().map(|s| prices.cost(&s.model, s.usage)).sum();
        let final_sql = result.final_sql.as_ref().map(|q| q.text().to_string());
        Self {
            index: sample.index,
            db_id: sample.db_id.clone(),
            question: sample.question.clone(),
            gold_sql: sample.gold_query.clone(),
            exact_match: final_sql
                .as_deref()
                .is_some_and(|s| normalize_for_em(s) == normalize_for_em(&sample.gold_query)),
            final_sql,
            ea: !stage_error && result.ea == Some(true),
            valid: !stage_error && result.outcome.as_ref().is_some_and(|o| o.is_success()),
            attempts: result.trace.attempts.len() as u32,
            status: result.status(),
            stage_error,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            tokens: usage.total(),
            cost,
            error: result.trace.error.clone(),
        }
    }

    fn failed(sample: &Sample, error: String) -> Self {
        Self {
            index: sample.index,
            db_id: sample.db_id.clone(),
            question: sample.question.clone(),
            gold_sql: sample.gold_query.clone(),
            final_sql: None,
            ea: false,
            valid: false,
            attempts: 0,
            status: RunStatus::StageError,
            stage_error: true,
            exact_match: false,
            prompt_tokens: 0,
            completion_tokens: 0,
            tokens: 0,
            cost: 0.0,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub ea_count: usize,
    pub execution_accuracy: Fixed2,
    pub valid_count: usize,
    pub valid_sql_rate: Fixed2,
    pub stage_errors: usize,
    pub mean_attempts: Fixed2,
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub total_cost: f64,
    /// Not an accuracy measure; string equality misses equivalent queries.
    pub exact_match_rate: Fixed2,
}

/// Aggregates over per-sample rows. Percentages are rounded half-up to two
/// decimals.
pub fn compute_metrics(rows: &[SampleRow]) -> Result<Metrics, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyRows);
    }
    let n = rows.len() as u64;
    let count = |f: fn(&SampleRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let ea_count = count(|r| r.ea);
    let valid_count = count(|r| r.valid);
    let em_count = count(|r| r.exact_match);
    let mut hist = BTreeMap::new();
    for r in rows {
        *hist.entry(r.attempts).or_insert(0) += 1;
    }
    let total_attempts: u64 = rows.iter().map(|r| r.attempts as u64).sum();
    Ok(Metrics {
        samples: rows.len(),
        ea_count,
        execution_accuracy: Fixed2::percent(ea_count as u64, n),
        valid_count,
        valid_sql_rate: Fixed2::percent(valid_count as u64, n),
        stage_errors: count(|r| r.stage_error),
        mean_attempts: Fixed2::ratio(total_attempts, n, 1),
        attempts_histogram: hist,
        prompt_tokens: rows.iter().map(|r| r.prompt_tokens).sum(),
        completion_tokens: rows.iter().map(|r| r.completion_tokens).sum(),
        total_tokens: rows.iter().map(|r| r.tokens).sum(),
        total_cost: rows.iter().map(|r| r.cost).sum(),
        exact_match_rate: Fixed2::percent(em_count as u64, n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: Metrics,
    pub rows: Vec<SampleRow>,
}

impl RunReport {
    /// Rows sorted by sample index.
    pub fn from_rows(mut rows: Vec<SampleRow>) -> Result<Self, EvalError> {
        rows.sort_by_key(|r| r.index);
        let metrics = compute_metrics(&rows)?;
        Ok(Self { metrics, rows })
    }
}

// ---------------------------------------------------------------------------
// Checkpointing and batch runs
// ---------------------------------------------------------------------------

/// Reads checkpointed rows; later lines win for duplicate indices, and
/// lines that do not parse (e.g. a torn final write) are skipped.
pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<usize, SampleRow>, EvalError> {
    let mut rows = BTreeMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(rows),
        Err(e) => return Err(io_err(path)(e)),
    };
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if let Ok(row) = serde_json::from_str::<SampleRow>(&line) {
            rows.insert(row.index, row);
        }
    }
    Ok(rows)
}

struct Checkpoint {
    path: PathBuf,
    file: Mutex<File>,
}

impl Checkpoint {
    fn open(path: &Path) -> Result<Self, EvalError> {
        // Make sure a torn last line does not glue onto the next record.
        let needs_newline = fs::read(path).map(|b| !b.is_empty() && b.last() != Some(&b'\n')).unwrap_or(false);
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        if needs_newline {
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        Ok(Self { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    fn append(&self, row: &SampleRow) -> Result<(), EvalError> {
        let mut line = serde_json::to_string(row).expect("rows serialize");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }
}

pub struct EvalOptions<'a> {
    pub parallelism: usize,
    pub checkpoint: Option<PathBuf>,
    pub prices: PriceTable,
    pub traces: Option<&'a TraceWriter>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { parallelism: 4, checkpoint: None, prices: PriceTable::default(), traces: None }
    }
}

fn run_one(pipeline: &Pipeline, dataset: &Dataset, sample: &Sample, opts: &EvalOptions<'_>) -> SampleRow {
    let Some(schema) = dataset.schemas.get(&sample.db_id) else {
        return SampleRow::failed(sample, format!("no schema for `{}`", sample.db_id));
    };
    let db_file = dataset.db_file(&sample.db_id);
    let sample_id = sample.index.to_string();
    let input = PipelineInput {
        sample_id: &sample_id,
        question: &sample.question,
        schema,
        db_file: &db_file,
        gold_query: Some(&sample.gold_query),
    };
    match catch_unwind(AssertUnwindSafe(|| pipeline.run(&input))) {
        Ok(Ok(result)) => {
            if let Some(w) = opts.traces {
                // Trace loss must not sink the sample.
                let _ = w.append(&result.trace);
            }
            SampleRow::from_result(sample, &result, &opts.prices)
        }
        Ok(Err(e)) => SampleRow::failed(sample, e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            SampleRow::failed(sample, format!("sample crashed: {msg}"))
        }
    }
}

/// Runs every sample not already in the checkpoint, then aggregates.
/// Failures stay inside their sample's row.
pub fn evaluate(dataset: &Dataset, pipeline: &Pipeline, opts: &EvalOptions<'_>) -> Result<RunReport, EvalError> {
    let mut done = match &opts.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => BTreeMap::new(),
    };
    let wanted: BTreeSet<usize> = dataset.samples.iter().map(|s| s.index).collect();
    done.retain(|k, _| wanted.contains(k));
    let pending: Vec<&Sample> = dataset.samples.iter().filter(|s| !done.contains_key(&s.index)).collect();
    let checkpoint = opts.checkpoint.as_deref().map(Checkpoint::open).transpose()?;

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(pending.len()));
    let first_error: Mutex<Option<EvalError>> = Mutex::new(None);
    let workers = opts.parallelism.clamp(1, pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = pending.get(i) else { break };
                let row = run_one(pipeline, dataset, sample, opts);
                if let Some(cp) = &checkpoint {
                    if let Err(e) = cp.append(&row) {
                        first_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                    }
                }
                results.lock().unwrap_or_else(|e| e.into_inner()).push(row);
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    let mut rows: Vec<SampleRow> = done.into_values().collect();
    rows.extend(results.into_inner().unwrap_or_else(|e| e.into_inner()));
    RunReport::from_rows(rows)
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "samples.csv";
pub const REPORT_SUMMARY: &str = "summary.txt";

pub fn render_summary(report: &RunReport) -> String {
    let m = &report.metrics;
    let mut s = String::new();
    s.push_str(&format!("samples:            {}\n", m.samples));
    s.push_str(&format!("execution accuracy: {}% ({}/{})\n", m.execution_accuracy, m.ea_count, m.samples));
    s.push_str(&format!("valid SQL rate:     {}% ({}/{})\n", m.valid_sql_rate, m.valid_count, m.samples));
    s.push_str(&format!("stage errors:       {}\n", m.stage_errors));
    s.push_str(&format!("mean attempts:      {}\n", m.mean_attempts));
    let hist: Vec<String> = m.attempts_histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    s.push_str(&format!("attempts histogram: {}\n", hist.join(" ")));
    s.push_str(&format!(
        "tokens:             {} (prompt {}, completion {})\n",
        m.total_tokens, m.prompt_tokens, m.completion_tokens
    ));
    s.push_str(&format!("cost:               ${:.2}\n", m.total_cost));
    s.push_str(&format!("exact match (diagnostic only, not accuracy): {}%\n", m.exact_match_rate));
    s
}

/// Writes `report.json`, `samples.csv`, and `summary.txt` into `out_dir`.
pub fn write_report(report: &RunReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let json_path = dir.join(REPORT_JSON);
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;

    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err =
        |e: csv::Error| EvalError::Io { path: csv_path.display().to_string(), source: std::io::Error::other(e) };
    w.write_record([
        "index",
        "db_id",
        "ea",
        "valid",
        "attempts",
        "status",
        "stage_error",
        "tokens",
        "cost",
        "exact_match_diagnostic",
        "final_sql",
    ])
    .map_err(csv_err)?;
    for r in &report.rows {
        let status =
            serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        w.write_record([
            r.index.to_string(),
            r.db_id.clone(),
            r.ea.to_string(),
            r.valid.to_string(),
            r.attempts.to_string(),
            status,
            r.stage_error.to_string(),
            r.tokens.to_string(),
            format!("{:.6}", r.cost),
            r.exact_match.to_string(),
            r.final_sql.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    fs::write(&csv_path, bytes).map_err(io_err(&csv_path))?;

    let summary_path = dir.join(REPORT_SUMMARY);
    fs::write(&summary_path, render_summary(report)).map_err(io_err(&summary_path))?;

    Ok(vec![json_path, csv_path, summary_path])
}
