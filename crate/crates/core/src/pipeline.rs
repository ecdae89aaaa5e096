//! End-to-end orchestration for one question: schema linking, subproblem
//! decomposition, query planning, SQL generation, execution, and the bounded
//! taxonomy-guided correction loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::tokenizer::{Token, Tokenizer};
use thiserror::Error;

use crate::agents::{Agents, StageError, StageRecord, TemplateSet};
use crate::exec::{self, ExecError, ExecutionOutcome, FailureKind, SqlQuery};
use crate::gateway::{Gateway, Usage};
use crate::schema::{DatabaseSchema, LinkPolicy, SchemaFormat};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionTrigger {
    /// Correct only queries that fail or time out.
    ExecutionErrorOnly,
    /// Correct any query whose result differs from the gold query's.
    #[default]
    GoldMismatch,
}

/// What to do when the schema-linking crop names unknown entities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidLinkPolicy {
    /// Drop unknown tables/columns; use the full schema if nothing is left.
    #[default]
    Prune,
    FullSchema,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_correction_attempts: u32,
    pub skip_query_plan: bool,
    pub skip_correction: bool,
    pub trigger: CorrectionTrigger,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub schema_format: SchemaFormat,
    pub link_policy: LinkPolicy,
    pub on_invalid_link: InvalidLinkPolicy,
    /// Also show the linked schema to the SQL agent.
    pub sql_sees_schema: bool,
    /// Result rows quoted back to the correction agent.
    pub feedback_preview_rows: usize,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_correction_attempts: 3,
            skip_query_plan: false,
            skip_correction: false,
            trigger: CorrectionTrigger::GoldMismatch,
            timeout: exec::DEFAULT_TIMEOUT,
            schema_format: SchemaFormat::Ddl,
            link_policy: LinkPolicy::default(),
            on_invalid_link: InvalidLinkPolicy::Prune,
            sql_sees_schema: false,
            feedback_preview_rows: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the gold_mismatch trigger needs a gold query")]
    MissingGold,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Solved,
    Exhausted,
    StageError,
}

/// Trace-friendly view of an execution outcome: status plus a short preview.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_kind: Option<FailureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preview: Vec<Vec<String>>,
}

impl OutcomeSummary {
    fn of(outcome: &ExecutionOutcome, preview_rows: usize) -> Self {
        match outcome {
            ExecutionOutcome::Success { rows, .. } => Self {
                status: "success".into(),
                failure_kind: None,
                message: None,
                row_count: Some(rows.len()),
                preview: rows.iter().take(preview_rows).map(|r| r.iter().map(|v| v.to_string()).collect()).collect(),
            },
            ExecutionOutcome::Failure { kind, message } => Self {
                status: "failure".into(),
                failure_kind: Some(*kind),
                message: Some(message.clone()),
                row_count: None,
                preview: Vec::new(),
            },
            ExecutionOutcome::Timeout => Self {
                status: "timeout".into(),
                failure_kind: None,
                message: None,
                row_count: None,
                preview: Vec::new(),
            },
        }
    }
}

/// One executed (or unexecutable) candidate query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    /// 0 for the initial query, then the correction round number.
    pub index: u32,
    pub sql: String,
    /// False when the response held no SQL statement.
    pub sanitized: bool,
    pub outcome: OutcomeSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ea: Option<bool>,
    /// Same query as an earlier attempt, up to whitespace.
    #[serde(default)]
    pub repeat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub sample_id: String,
    pub db_id: String,
    pub question: String,
    pub stages: Vec<StageRecord>,
    pub attempts: Vec<Attempt>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PipelineTrace {
    pub fn usage(&self) -> Usage {
        let mut u = Usage::default();
        for s in &self.stages {
            u += s.usage;
        }
        u
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub final_sql: Option<SqlQuery>,
    pub outcome: Option<ExecutionOutcome>,
    pub ea: Option<bool>,
    pub trace: PipelineTrace,
}

impl PipelineResult {
    pub fn status(&self) -> RunStatus {
        self.trace.status
    }

    /// Number of correction rounds that produced an attempt.
    pub fn correction_rounds(&self) -> usize {
        self.trace.attempts.len().saturating_sub(1)
    }
}

/// One question to answer.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInput<'a> {
    pub sample_id: &'a str,
    pub question: &'a str,
    pub schema: &'a DatabaseSchema,
    pub db_file: &'a Path,
    pub gold_query: Option<&'a str>,
}

fn normalized_tokens(sql: &str) -> Vec<String> {
    match Tokenizer::new(&SQLiteDialect {}, sql).tokenize() {
        Ok(tokens) => {
            tokens.into_iter().filter(|t| !matches!(t, Token::Whitespace(_))).map(|t| t.to_string()).collect()
        }
        Err(_) => vec![sql.split_whitespace().collect::<String>()],
    }
}

/// True when `candidate` matches an earlier query up to whitespace.
pub fn repeat_guard<'a>(previous: impl IntoIterator<Item = &'a str>, candidate: &str) -> bool {
    let c = normalized_tokens(candidate);
    previous.into_iter().any(|p| normalized_tokens(p) == c)
}

struct Evaluated {
    attempt: Attempt,
    query: Option<SqlQuery>,
    outcome: ExecutionOutcome,
}

/// Runs questions through the agent chain. Cheap to share across threads.
pub struct Pipeline {
    pub gateway: Arc<Gateway>,
    pub templates: Arc<TemplateSet>,
    pub taxonomy: Arc<Taxonomy>,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        gateway: Arc<Gateway>,
        templates: Arc<TemplateSet>,
        taxonomy: Arc<Taxonomy>,
        config: PipelineConfig,
    ) -> Self {
        Self { gateway, templates, taxonomy, config }
    }

    fn fires(&self, e: &Evaluated) -> bool {
        match self.config.trigger {
            CorrectionTrigger::ExecutionErrorOnly => !e.outcome.is_success(),
            CorrectionTrigger::GoldMismatch => e.attempt.ea != Some(true),
        }
    }

    fn evaluate(
        &self,
        index: u32,
        raw: &str,
        input: &PipelineInput<'_>,
        gold: Option<&(String, ExecutionOutcome)>,
        previous: &[Attempt],
        warnings: &mut Vec<String>,
    ) -> Result<Evaluated, PipelineError> {
        let (query, outcome, sql_text) = match exec::sanitize_detailed(raw) {
            Ok(s) => {
                if !s.dropped_statements.is_empty() {
                    warnings
                        .push(format!("attempt {index}: dropped {} extra statement(s)", s.dropped_statements.len()));
                }
                let outcome = exec::execute(input.db_file, &s.query, self.config.timeout)?;
                let text = s.query.text().to_string();
                (Some(s.query), outcome, text)
            }
            Err(e) => (
                None,
                ExecutionOutcome::Failure { kind: FailureKind::Syntax, message: e.to_string() },
                raw.trim().to_string(),
            ),
        };
        let ea = gold.map(|(gold_sql, gold_outcome)| exec::execution_match(gold_sql, gold_outcome, &outcome));
        let repeat = query.is_some() && repeat_guard(previous.iter().map(|a| a.sql.as_str()), &sql_text);
        Ok(Evaluated {
            attempt: Attempt {
                index,
                sql: sql_text,
                sanitized: query.is_some(),
                outcome: OutcomeSummary::of(&outcome, self.config.feedback_preview_rows),
                ea,
                repeat,
            },
            query,
            outcome,
        })
    }

    fn feedback(&self, e: &Evaluated) -> String {
        if !e.attempt.sanitized {
            return format!(
                "The previous response did not contain a usable SQL statement ({}).",
                match &e.outcome {
                    ExecutionOutcome::Failure { message, .. } => message.as_str(),
                    _ => "unknown",
                }
            );
        }
        match &e.outcome {
            ExecutionOutcome::Success { .. } => format!(
                "The query ran without error, but its result does not match the expected answer. {}",
                e.outcome.describe(self.config.feedback_preview_rows)
            ),
            other => other.describe(self.config.feedback_preview_rows),
        }
    }

    /// Answers one question. Agent failures end the run with status
    /// `stage_error`; the trace is complete up to that point.
    pub fn run(&self, input: &PipelineInput<'_>) -> Result<PipelineResult, PipelineError> {
        if self.config.trigger == CorrectionTrigger::GoldMismatch && input.gold_query.is_none() {
            return Err(PipelineError::MissingGold);
        }
        let cfg = &self.config;
        let agents = Agents::new(&self.gateway, &self.templates, &self.taxonomy);
        let mut stages = Vec::new();
        let mut warnings = Vec::new();
        let mut attempts: Vec<Attempt> = Vec::new();

        let gold = match input.gold_query {
            Some(g) => {
                let q = SqlQuery::trusted(g).ok_or(PipelineError::MissingGold)?;
                let outcome = exec::execute(input.db_file, &q, cfg.timeout)?;
                if !outcome.is_success() {
                    warnings.push(format!("gold query did not execute: {}", outcome.describe(0)));
                }
                Some((q.into_string(), outcome))
            }
            None => None,
        };

        let finish = |stages: Vec<StageRecord>,
                      attempts: Vec<Attempt>,
                      warnings: Vec<String>,
                      status: RunStatus,
                      error: Option<String>,
                      last: Option<Evaluated>| {
            let (final_sql, outcome, ea) = match last {
                Some(e) => (e.query, Some(e.outcome), e.attempt.ea),
                None => (None, None, None),
            };
            PipelineResult {
                final_sql,
                outcome,
                ea,
                trace: PipelineTrace {
                    sample_id: input.sample_id.to_string(),
                    db_id: input.schema.db_id.clone(),
                    question: input.question.to_string(),
                    stages,
                    attempts,
                    status,
                    warnings,
                    error,
                },
            }
        };
        macro_rules! stage {
            ($call:expr, $last:expr) => {
                match $call {
                    Ok(v) => v,
                    Err(e) => {
                        let e: StageError = e;
                        return Ok(finish(
                            stages,
                            attempts,
                            warnings,
                            RunStatus::StageError,
                            Some(e.to_string()),
                            $last,
                        ));
                    }
                }
            };
        }

        let full_text = input.schema.render(cfg.schema_format);
        let link = stage!(
            agents.run_schema_linking(input.question, input.schema, &full_text, cfg.link_policy, &mut stages),
            None
        );
        let linked = match link.validation {
            Ok(v) => v.link,
            Err(errs) => {
                let listed: Vec<String> = errs.iter().map(|e| e.to_string()).collect();
                warnings.push(format!("schema link invalid: {}", listed.join("; ")));
                match cfg.on_invalid_link {
                    InvalidLinkPolicy::Prune => link.link.pruned(input.schema).unwrap_or_else(|| {
                        warnings.push("nothing survived pruning; using the full schema".into());
                        input.schema.full_link()
                    }),
                    InvalidLinkPolicy::FullSchema => input.schema.full_link(),
                    InvalidLinkPolicy::Fail => {
                        let msg = format!("schema_linking stage failed: {}", listed.join("; "));
                        return Ok(finish(stages, attempts, warnings, RunStatus::StageError, Some(msg), None));
                    }
                }
            }
        };
        let linked_text = linked.render(input.schema, cfg.schema_format);

        let subproblems = stage!(agents.run_subproblem(input.question, &linked_text, &mut stages), None);
        let subproblems_text = subproblems.render();
        let plan_text = if cfg.skip_query_plan {
            subproblems_text.clone()
        } else {
            stage!(agents.run_query_plan(input.question, &linked_text, &subproblems, &mut stages), None).render()
        };
        let raw = stage!(
            agents.run_sql(
                input.question,
                &plan_text,
                &subproblems_text,
                cfg.sql_sees_schema.then_some(linked_text.as_str()),
                &mut stages,
            ),
            None
        );

        let mut last = self.evaluate(0, &raw, input, gold.as_ref(), &attempts, &mut warnings)?;
        let rounds = if cfg.skip_correction { 0 } else { cfg.max_correction_attempts };
        for round in 1..=rounds {
            if !self.fires(&last) {
                break;
            }
            let feedback = self.feedback(&last);
            let failed_sql = last.attempt.sql.clone();
            attempts.push(last.attempt.clone());
            let plan = stage!(
                agents.run_correction_plan(input.question, &linked_text, &failed_sql, &feedback, round, &mut stages),
                Some(last)
            );
            let raw = stage!(
                agents.run_correction_sql(input.question, &linked_text, &plan, &failed_sql, round, &mut stages),
                Some(last)
            );
            let next = self.evaluate(round, &raw, input, gold.as_ref(), &attempts, &mut warnings)?;
            if next.attempt.repeat {
                warnings.push(format!("attempt {round} repeats an earlier query"));
            }
            last = next;
        }
        let status = if self.fires(&last) { RunStatus::Exhausted } else { RunStatus::Solved };
        attempts.push(last.attempt.clone());
        Ok(finish(stages, attempts, warnings, status, None, Some(last)))
    }
}

/// Appends one JSON line per pipeline trace to a run-scoped file.
pub struct TraceWriter {
    out: Mutex<BufWriter<File>>,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: Mutex::new(BufWriter::new(f)) })
    }

    pub fn append(&self, trace: &PipelineTrace) -> std::io::Result<()> {
        let line = serde_json::to_string(trace).map_err(std::io::Error::other)?;
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

/// Reads every trace from a trace file, skipping lines that do not parse.
pub fn read_traces(path: impl AsRef<Path>) -> std::io::Result<Vec<PipelineTrace>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_guard_rules() {
        let prev = ["SELECT name FROM singer WHERE age > 20"];
        assert!(repeat_guard(prev, "SELECT name FROM singer WHERE age > 20"));
        assert!(repeat_guard(prev, "SELECT  name\nFROM singer WHERE age>20"));
        assert!(!repeat_guard(prev, "SELECT name FROM singer WHERE age > 30"));
        assert!(!repeat_guard([], "SELECT 1"));
    }

    #[test]
    fn string_literal_whitespace_is_significant() {
        assert!(!repeat_guard(["SELECT 'a b'"], "SELECT 'ab'"));
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = PipelineConfig::default();
        let v = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&v).unwrap();
        assert_eq!(back, c);
    }
}
