mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use nl2sql::agents::TemplateSet;
use nl2sql::eval::{self, EvalOptions, Slice};
use nl2sql::gateway::{cache_stats, clear_cache};
use nl2sql::pipeline::{read_traces, CorrectionTrigger, Pipeline, PipelineInput, RunStatus, TraceWriter};
use nl2sql::schema::{introspect_database, load_tables_json};
use nl2sql::taxonomy::default_taxonomy;

use config::FileConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_STAGE_ERRORS: u8 = 3;

#[derive(Parser)]
#[command(name = "nl2sql", version, about = "Multi-agent text-to-SQL with guided error correction")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question against one database.
    Ask(AskArgs),
    /// Run a benchmark questions file and write report files.
    Eval(EvalArgs),
    /// Pretty-print stage records from a trace file.
    Trace(TraceArgs),
    /// Error taxonomy.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
    /// Replay cache maintenance.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

/// Flags shared by `ask` and `eval`.
#[derive(Args)]
struct RunFlags {
    /// Directory holding `<db_id>/<db_id>.sqlite`.
    #[arg(long)]
    db_root: Option<PathBuf>,
    /// Benchmark tables.json; without it `ask` introspects the database.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Use this model for every agent.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Correction rounds after the first query.
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Per-query execution timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Skip the correction loop.
    #[arg(long)]
    no_correction: bool,
    /// Skip the query-plan agent.
    #[arg(long)]
    no_query_plan: bool,
    /// Correct only queries that fail to execute.
    #[arg(long)]
    errors_only: bool,
}

#[derive(Args)]
struct AskArgs {
    /// Database id.
    #[arg(long)]
    db: String,
    #[arg(long)]
    question: String,
    /// Gold query; enables the EA verdict.
    #[arg(long)]
    gold: Option<String>,
    /// Append the run trace to this JSONL file.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Questions file (JSON list with question, query, db_id).
    #[arg(long)]
    questions: PathBuf,
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Resume from and append to this JSONL file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Append every run trace to this JSONL file.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    file: PathBuf,
    /// Only this sample id.
    #[arg(long)]
    sample: Option<String>,
    /// Include full prompts.
    #[arg(long)]
    prompts: bool,
}

#[derive(Subcommand)]
enum TaxonomyAction {
    /// Tab-separated code, category, title, description.
    List,
}

#[derive(Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    Clear {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// An error carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

fn data(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_DATA, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", render_chain(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// Joins the cause chain, skipping causes their parent already quotes.
fn render_chain(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    let mut last = out.clone();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(usage)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Ask(a) => ask(&file, a),
        Command::Eval(a) => run_eval(&file, a),
        Command::Trace(a) => show_trace(a),
        Command::Taxonomy { action: TaxonomyAction::List } => {
            print!("{}", default_taxonomy().to_tsv());
            Ok(0)
        }
        Command::Cache { action } => cache(&file, action),
    }
}

fn build_pipeline(file: &FileConfig, flags: &RunFlags) -> Result<Pipeline, Failure> {
    let mut cfg = file.pipeline.clone();
    if let Some(n) = flags.max_attempts {
        cfg.max_correction_attempts = n;
    }
    if let Some(t) = flags.timeout {
        cfg.timeout = Duration::try_from_secs_f64(t).map_err(|e| usage(anyhow!("--timeout: {e}")))?;
    }
    cfg.skip_correction |= flags.no_correction;
    cfg.skip_query_plan |= flags.no_query_plan;
    if flags.errors_only {
        cfg.trigger = CorrectionTrigger::ExecutionErrorOnly;
    }
    let templates = match flags.templates_dir.as_ref().or(file.templates_dir.as_ref()) {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| data(e.into()))?,
        None => TemplateSet::default(),
    };
    let cache_dir = flags.cache_dir.as_deref().or(file.cache_dir.as_deref());
    let gateway = file.gateway(flags.model.as_deref(), cache_dir).map_err(usage)?;
    Ok(Pipeline::new(Arc::new(gateway), Arc::new(templates), Arc::new(default_taxonomy()), cfg))
}

fn db_root<'a>(file: &'a FileConfig, flags: &'a RunFlags) -> Result<&'a Path, Failure> {
    flags
        .db_root
        .as_deref()
        .or(file.db_root.as_deref())
        .ok_or_else(|| usage(anyhow!("--db-root is required (flag or config)")))
}

fn ask(file: &FileConfig, a: AskArgs) -> Result<u8, Failure> {
    let root = db_root(file, &a.run)?;
    let db_file = eval::db_path(root, &a.db);
    if !db_file.is_file() {
        return Err(data(anyhow!("database file {} does not exist", db_file.display())));
    }
    let schema = match a.run.tables.as_ref().or(file.tables.as_ref()) {
        Some(t) => load_tables_json(t)
            .map_err(|e| data(e.into()))?
            .into_iter()
            .find(|s| s.db_id == a.db)
            .ok_or_else(|| data(anyhow!("unknown db_id `{}` in {}", a.db, t.display())))?,
        None => {
            let mut s = introspect_database(&db_file).map_err(|e| data(e.into()))?;
            s.db_id = a.db.clone();
            s
        }
    };
    let mut pipeline = build_pipeline(file, &a.run)?;
    if a.gold.is_none() {
        // Without a gold query only execution errors can trigger correction.
        pipeline.config.trigger = CorrectionTrigger::ExecutionErrorOnly;
    }
    let input = PipelineInput {
        sample_id: "ask",
        question: &a.question,
        schema: &schema,
        db_file: &db_file,
        gold_query: a.gold.as_deref(),
    };
    let result = pipeline.run(&input).map_err(|e| data(e.into()))?;
    if let Some(path) = &a.trace {
        let w = TraceWriter::create(path).map_err(|e| data(anyhow!("{}: {e}", path.display())))?;
        w.append(&result.trace).map_err(|e| data(anyhow!("{}: {e}", path.display())))?;
    }

    match &result.final_sql {
        Some(q) => println!("{}", q.text()),
        None => println!("(no SQL)"),
    }
    println!("attempts: {}", result.trace.attempts.len());
    if let Some(o) = &result.outcome {
        println!("execution: {}", o.describe(0).lines().next().unwrap_or(""));
    }
    if a.gold.is_some() {
        println!("ea: {}", result.ea == Some(true));
    }
    if result.status() == RunStatus::StageError {
        eprintln!("error: {}", result.trace.error.as_deref().unwrap_or("stage error"));
        return Ok(EXIT_STAGE_ERRORS);
    }
    Ok(0)
}

fn run_eval(file: &FileConfig, a: EvalArgs) -> Result<u8, Failure> {
    let root = db_root(file, &a.run)?;
    let tables = a
        .run
        .tables
        .as_ref()
        .or(file.tables.as_ref())
        .ok_or_else(|| usage(anyhow!("--tables is required for eval (flag or config)")))?;
    let dataset = eval::load_dataset(&a.questions, tables, root, Slice { offset: a.offset, limit: a.limit })
        .map_err(|e| data(e.into()))?;
    if dataset.samples.is_empty() {
        return Err(data(anyhow!("no samples selected")));
    }
    let pipeline = build_pipeline(file, &a.run)?;
    let writer = match &a.trace {
        Some(p) => Some(TraceWriter::create(p).map_err(|e| data(anyhow!("{}: {e}", p.display())))?),
        None => None,
    };
    let opts = EvalOptions {
        parallelism: a.parallelism.or(file.parallelism).unwrap_or(4),
        checkpoint: a.checkpoint.clone(),
        prices: file.prices.clone().unwrap_or_default(),
        traces: writer.as_ref(),
    };
    let report = eval::evaluate(&dataset, &pipeline, &opts).map_err(|e| data(e.into()))?;
    eval::write_report(&report, &a.out).map_err(|e| data(e.into()))?;
    print!("{}", eval::render_summary(&report));
    println!("report written to {}", a.out.display());
    Ok(if report.metrics.stage_errors > 0 { EXIT_STAGE_ERRORS } else { 0 })
}

fn show_trace(a: TraceArgs) -> Result<u8, Failure> {
    let traces = read_traces(&a.file).map_err(|e| data(anyhow!("{}: {e}", a.file.display())))?;
    let selected: Vec<_> = traces.iter().filter(|t| a.sample.as_ref().is_none_or(|s| &t.sample_id == s)).collect();
    if selected.is_empty() {
        return Err(data(match &a.sample {
            Some(s) => anyhow!("sample `{s}` not found in {}", a.file.display()),
            None => anyhow!("{} holds no traces", a.file.display()),
        }));
    }
    for t in selected {
        println!("== sample {} ({}) status={:?}", t.sample_id, t.db_id, t.status);
        println!("question: {}", t.question);
        for s in &t.stages {
            let round = s.round.map(|r| format!(" round={r}")).unwrap_or_default();
            let reask = if s.call > 0 { " re-ask" } else { "" };
            println!(
                "-- {}{round}{reask} model={} tokens={}+{} {}ms",
                s.role, s.model, s.usage.prompt_tokens, s.usage.completion_tokens, s.wall_ms
            );
            if a.prompts {
                for m in &s.prompt {
                    println!("[{:?}]\n{}", m.role, m.content);
                }
            }
            if let Some(r) = &s.response {
                println!("{}", r.trim_end());
            }
            for w in &s.warnings {
                println!("warning: {w}");
            }
            if let Some(e) = &s.error {
                println!("error: {e}");
            }
        }
        for at in &t.attempts {
            let ea = at.ea.map(|v| format!(" ea={v}")).unwrap_or_default();
            let rep = if at.repeat { " (repeat)" } else { "" };
            println!("attempt {}: {}{ea}{rep}\n  {}", at.index, at.outcome.status, at.sql);
            if let Some(m) = &at.outcome.message {
                println!("  {m}");
            }
        }
        if let Some(e) = &t.error {
            println!("error: {e}");
        }
    }
    Ok(0)
}

fn cache(file: &FileConfig, action: CacheAction) -> Result<u8, Failure> {
    let (dir, clear) = match action {
        CacheAction::Stats { dir } => (dir, false),
        CacheAction::Clear { dir } => (dir, true),
    };
    let dir = dir
        .or_else(|| file.cache_dir.clone())
        .ok_or_else(|| usage(anyhow!("--dir is required (flag or config cache_dir)")))?;
    if clear {
        let n = clear_cache(&dir).with_context(|| dir.display().to_string()).map_err(data)?;
        println!("removed {n} entries from {}", dir.display());
    } else {
        let s = cache_stats(&dir).with_context(|| dir.display().to_string()).map_err(data)?;
        println!("entries: {}\nbytes: {}", s.entries, s.bytes);
    }
    Ok(0)
}
