//! The six agents. Each one renders a prompt template, calls the gateway,
//! and parses the reply into a typed artifact. Every gateway call leaves one
//! [`StageRecord`] in the caller's trace, and each stage re-asks at most
//! once when the reply cannot be parsed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::is_complete_statement;
use crate::gateway::{AgentRole, Gateway, Message, Usage};
use crate::schema::{
    validate_linked_schema, ColumnRef, DatabaseSchema, ForeignKey, LinkPolicy, LinkViolation, LinkedSchema,
    ValidatedLink,
};
use crate::taxonomy::{ErrorCode, Taxonomy};

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Question,
    Schema,
    Subproblems,
    Plan,
    FailedSql,
    ExecFeedback,
    Taxonomy,
    CorrectionPlan,
}

impl Placeholder {
    pub const ALL: [Placeholder; 8] = [
        Placeholder::Question,
        Placeholder::Schema,
        Placeholder::Subproblems,
        Placeholder::Plan,
        Placeholder::FailedSql,
        Placeholder::ExecFeedback,
        Placeholder::Taxonomy,
        Placeholder::CorrectionPlan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Question => "question",
            Placeholder::Schema => "schema",
            Placeholder::Subproblems => "subproblems",
            Placeholder::Plan => "plan",
            Placeholder::FailedSql => "failed_sql",
            Placeholder::ExecFeedback => "exec_feedback",
            Placeholder::Taxonomy => "taxonomy",
            Placeholder::CorrectionPlan => "correction_plan",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Placeholders each role's caller binds.
    pub fn available_for(role: AgentRole) -> &'static [Placeholder] {
        use Placeholder::*;
        match role {
            AgentRole::SchemaLinking => &[Question, Schema],
            AgentRole::Subproblem => &[Question, Schema],
            AgentRole::QueryPlan => &[Question, Schema, Subproblems],
            AgentRole::Sql => &[Question, Schema, Subproblems, Plan],
            AgentRole::CorrectionPlan => &[Question, Schema, FailedSql, ExecFeedback, Taxonomy],
            AgentRole::CorrectionSql => &[Question, Schema, FailedSql, CorrectionPlan],
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template for {role}: {message}")]
    Invalid { role: AgentRole, message: String },
    #[error("template for {role} uses {{{placeholder}}} but no value was bound")]
    Unbound { role: AgentRole, placeholder: &'static str },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Placeholder),
}

fn parse_pieces(role: AgentRole, text: &str) -> Result<Vec<Piece>, TemplateError> {
    let invalid = |message: String| TemplateError::Invalid { role, message };
    let mut pieces = Vec::new();
    let mut buf = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                buf.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                buf.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        _ => return Err(invalid(format!("unterminated placeholder `{{{name}`"))),
                    }
                }
                let p =
                    Placeholder::parse(&name).ok_or_else(|| invalid(format!("unknown placeholder `{{{name}}}`")))?;
                if !Placeholder::available_for(role).contains(&p) {
                    return Err(invalid(format!("placeholder `{{{name}}}` is not available to this agent")));
                }
                if !buf.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut buf)));
                }
                pieces.push(Piece::Slot(p));
            }
            '}' => return Err(invalid("stray `}` (write `}}` for a literal brace)".into())),
            _ => buf.push(c),
        }
    }
    if !buf.is_empty() {
        pieces.push(Piece::Text(buf));
    }
    Ok(pieces)
}

/// A system message plus a user message template.
///
/// File format: a `### system` line, the system text, a `### user` line,
/// then the user template. `{name}` interpolates a placeholder; `{{` and
/// `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: AgentRole,
    system: Vec<Piece>,
    user: Vec<Piece>,
}

/// Values for template placeholders.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<Placeholder, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, p: Placeholder, value: impl Into<String>) -> Self {
        self.0.insert(p, value.into());
        self
    }
}

impl PromptTemplate {
    pub fn parse(role: AgentRole, text: &str) -> Result<Self, TemplateError> {
        let invalid = |message: &str| TemplateError::Invalid { role, message: message.to_string() };
        let mut system = None;
        let mut user = None;
        let mut current: Option<&mut Option<String>> = None;
        for line in text.split_inclusive('\n') {
            match line.trim_end() {
                "### system" => current = Some(&mut system),
                "### user" => current = Some(&mut user),
                _ => match current.as_deref_mut() {
                    Some(slot) => slot.get_or_insert_with(String::new).push_str(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(invalid("text before the first `### system` or `### user` header")),
                },
            }
        }
        let user = user.ok_or_else(|| invalid("missing `### user` section"))?;
        let system = system.unwrap_or_default();
        Ok(Self { role, system: parse_pieces(role, system.trim())?, user: parse_pieces(role, user.trim())? })
    }

    pub fn placeholders(&self) -> BTreeSet<Placeholder> {
        self.system
            .iter()
            .chain(&self.user)
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Text(_) => None,
            })
            .collect()
    }

    fn fill(&self, pieces: &[Piece], b: &Bindings) -> Result<String, TemplateError> {
        let mut out = String::new();
        for p in pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    out.push_str(b.0.get(s).ok_or(TemplateError::Unbound { role: self.role, placeholder: s.name() })?)
                }
            }
        }
        Ok(out)
    }

    /// System message (when non-empty) followed by the user message.
    pub fn render(&self, bindings: &Bindings) -> Result<Vec<Message>, TemplateError> {
        let system = self.fill(&self.system, bindings)?;
        let user = self.fill(&self.user, bindings)?;
        let mut msgs = Vec::with_capacity(2);
        if !system.is_empty() {
            msgs.push(Message::system(system));
        }
        msgs.push(Message::user(user));
        Ok(msgs)
    }
}

/// One template per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet(BTreeMap<AgentRole, PromptTemplate>);

fn default_template_text(role: AgentRole) -> &'static str {
    match role {
        AgentRole::SchemaLinking => include_str!("../templates/schema_linking.txt"),
        AgentRole::Subproblem => include_str!("../templates/subproblem.txt"),
        AgentRole::QueryPlan => include_str!("../templates/query_plan.txt"),
        AgentRole::Sql => include_str!("../templates/sql.txt"),
        AgentRole::CorrectionPlan => include_str!("../templates/correction_plan.txt"),
        AgentRole::CorrectionSql => include_str!("../templates/correction_sql.txt"),
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self(
            AgentRole::ALL
                .iter()
                .map(|r| (*r, PromptTemplate::parse(*r, default_template_text(*r)).expect("built-in template parses")))
                .collect(),
        )
    }
}

impl TemplateSet {
    /// Defaults, overridden by any `<role>.txt` present in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for role in AgentRole::ALL {
            let path = dir.as_ref().join(format!("{}.txt", role.as_str()));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
            set.0.insert(role, PromptTemplate::parse(role, &text)?);
        }
        Ok(set)
    }

    pub fn get(&self, role: AgentRole) -> &PromptTemplate {
        &self.0[&role]
    }

    pub fn default_text(role: AgentRole) -> &'static str {
        default_template_text(role)
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Clause keys a subproblem decomposition may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Clause {
    #[serde(rename = "SELECT")]
    Select,
    #[serde(rename = "FROM")]
    From,
    #[serde(rename = "WHERE")]
    Where,
    #[serde(rename = "GROUP BY")]
    GroupBy,
    #[serde(rename = "JOIN")]
    Join,
    #[serde(rename = "DISTINCT")]
    Distinct,
    #[serde(rename = "ORDER BY")]
    OrderBy,
    #[serde(rename = "HAVING")]
    Having,
    #[serde(rename = "EXCEPT")]
    Except,
    #[serde(rename = "LIMIT")]
    Limit,
    #[serde(rename = "UNION")]
    Union,
    #[serde(rename = "INTERSECT")]
    Intersect,
}

impl Clause {
    pub const ALL: [Clause; 12] = [
        Clause::Select,
        Clause::From,
        Clause::Where,
        Clause::GroupBy,
        Clause::Join,
        Clause::Distinct,
        Clause::OrderBy,
        Clause::Having,
        Clause::Except,
        Clause::Limit,
        Clause::Union,
        Clause::Intersect,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Clause::Select => "SELECT",
            Clause::From => "FROM",
            Clause::Where => "WHERE",
            Clause::GroupBy => "GROUP BY",
            Clause::Join => "JOIN",
            Clause::Distinct => "DISTINCT",
            Clause::OrderBy => "ORDER BY",
            Clause::Having => "HAVING",
            Clause::Except => "EXCEPT",
            Clause::Limit => "LIMIT",
            Clause::Union => "UNION",
            Clause::Intersect => "INTERSECT",
        }
    }

    /// Accepts `group by`, `GROUP_BY`, `GroupBy`-ish spellings.
    pub fn parse(key: &str) -> Option<Self> {
        let norm: String =
            key.trim().to_ascii_uppercase().replace(['_', '-'], " ").split_whitespace().collect::<Vec<_>>().join(" ");
        let norm = match norm.as_str() {
            "GROUPBY" => "GROUP BY".to_string(),
            "ORDERBY" => "ORDER BY".to_string(),
            _ => norm,
        };
        Self::ALL.into_iter().find(|c| c.keyword() == norm)
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Clause-keyed partial expressions, in the order the agent gave them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubproblemSet {
    pub clauses: Vec<(Clause, String)>,
}

impl SubproblemSet {
    pub fn get(&self, c: Clause) -> Option<&str> {
        self.clauses.iter().find(|(k, _)| *k == c).map(|(_, v)| v.as_str())
    }

    /// `CLAUSE: expression` lines, or a note when empty.
    pub fn render(&self) -> String {
        if self.clauses.is_empty() {
            return "(no clause-level subproblems; the query is simple)".to_string();
        }
        self.clauses.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl QueryPlan {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.rationale {
            out.push_str("Reasoning: ");
            out.push_str(r.trim());
            out.push_str("\n\n");
        }
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, s));
        }
        out.trim_end().to_string()
    }

    /// Indices of steps that parse as complete SQL statements.
    pub fn sql_steps(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, s)| step_is_sql(s)).map(|(i, _)| i).collect()
    }
}

fn strip_step_prefix(step: &str) -> &str {
    let s = step.trim().trim_start_matches(['-', '*', '•']).trim_start();
    let lower = s.to_ascii_lowercase();
    let s = if lower.starts_with("step") {
        let rest = &s[4..];
        let digits = rest.trim_start().trim_start_matches(|c: char| c.is_ascii_digit());
        if digits.len() < rest.trim_start().len() {
            digits.trim_start_matches([':', '.', ')']).trim_start()
        } else {
            s
        }
    } else {
        s
    };
    let digits = s.trim_start_matches(|c: char| c.is_ascii_digit());
    if digits.len() < s.len() && digits.starts_with(['.', ')', ':']) {
        digits[1..].trim_start()
    } else {
        s
    }
}

fn step_is_sql(step: &str) -> bool {
    let s = strip_step_prefix(step).trim_matches('`').trim();
    is_complete_statement(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrectionPlan {
    pub diagnosed_codes: Vec<ErrorCode>,
    pub unknown_codes: Vec<String>,
    pub repair_steps: Vec<String>,
    pub rationale: String,
}

impl CorrectionPlan {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.diagnosed_codes.is_empty() {
            let codes: Vec<String> = self.diagnosed_codes.iter().map(|c| format!("{} ({})", c.code, c.title)).collect();
            out.push_str(&format!("Diagnosed errors: {}\n", codes.join(", ")));
        }
        if !self.rationale.trim().is_empty() {
            out.push_str(&format!("Reasoning: {}\n", self.rationale.trim()));
        }
        out.push_str("Repair steps:\n");
        for (i, s) in self.repair_steps.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, s));
        }
        out.trim_end().to_string()
    }
}

/// Schema-linking result: the crop as the agent gave it, plus its
/// validation against the parent schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkOutcome {
    pub link: LinkedSchema,
    pub validation: Result<ValidatedLink, Vec<LinkViolation>>,
}

// ---------------------------------------------------------------------------
// Payload extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no structured object found in response")]
pub struct ExtractError;

/// End index (exclusive) of the balanced group starting at `start`, with
/// double-quoted strings respected.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas that directly precede a closing bracket, outside strings.
fn strip_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn valid_json_at(text: &str, start: usize) -> Option<String> {
    let end = balanced_end(text, start)?;
    let span = &text[start..end];
    if serde_json::from_str::<Value>(span).is_ok() {
        return Some(span.to_string());
    }
    let repaired = strip_trailing_commas(span);
    serde_json::from_str::<Value>(&repaired).ok().map(|_| repaired)
}

fn first_json(text: &str, open: u8) -> Option<String> {
    text.bytes().enumerate().filter(|(_, b)| *b == open).find_map(|(i, _)| valid_json_at(text, i))
}

/// Pulls the first JSON object (or, failing that, array) out of a chatty
/// reply. Fenced blocks are tried first.
pub fn extract_structured_payload(response: &str) -> Result<String, ExtractError> {
    let mut rest = response;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        let block = body[..end].trim();
        if let Some(found) = first_json(block, b'{').or_else(|| first_json(block, b'[')) {
            return Ok(found);
        }
        rest = &body[(end + 3).min(body.len())..];
    }
    first_json(response, b'{').or_else(|| first_json(response, b'[')).ok_or(ExtractError)
}

// ---------------------------------------------------------------------------
// Response parsers
// ---------------------------------------------------------------------------

type Parsed<T> = Result<(T, Vec<String>), String>;

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(value_text).filter(|s| !s.is_empty()).collect();
            Some(parts.join(", "))
        }
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items.iter().filter_map(value_text).filter(|s| !s.is_empty()).collect(),
        Some(Value::String(s)) => numbered_lines(s),
        _ => Vec::new(),
    }
}

/// Lines that look like list items (`1.`, `2)`, `-`, `*`), prefix removed.
fn numbered_lines(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| {
            let t = l.trim();
            let stripped = strip_step_prefix(t);
            let is_item = stripped.len() < t.len() || t.starts_with(['-', '*', '•']);
            (is_item && !stripped.is_empty()).then(|| stripped.to_string())
        })
        .collect()
}

fn parse_edge(v: &Value) -> Option<ForeignKey> {
    match v {
        Value::Array(pair) if pair.len() == 2 => {
            Some(ForeignKey::new(ColumnRef::parse(pair[0].as_str()?)?, ColumnRef::parse(pair[1].as_str()?)?))
        }
        Value::String(s) => {
            let (a, b) = s.split_once('=').or_else(|| s.split_once("->"))?;
            let b = b.trim_start_matches('>');
            Some(ForeignKey::new(ColumnRef::parse(a)?, ColumnRef::parse(b)?))
        }
        Value::Object(o) => Some(ForeignKey::new(
            ColumnRef::parse(o.get("from")?.as_str()?)?,
            ColumnRef::parse(o.get("to")?.as_str()?)?,
        )),
        _ => None,
    }
}

fn parse_link(raw: &str, db_id: &str) -> Parsed<LinkedSchema> {
    let payload = extract_structured_payload(raw).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&payload).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let mut warnings = Vec::new();
    let mut kept: BTreeMap<String, Vec<String>> = BTreeMap::new();
    match obj.get("tables") {
        Some(Value::Object(tables)) => {
            for (t, cols) in tables {
                kept.entry(t.clone()).or_default().extend(string_list(Some(cols)));
            }
        }
        Some(Value::Array(items)) => {
            for item in items {
                match item {
                    Value::Object(o) => {
                        let name = o
                            .get("table")
                            .or_else(|| o.get("name"))
                            .and_then(Value::as_str)
                            .ok_or("table entry without a name")?;
                        kept.entry(name.to_string()).or_default().extend(string_list(o.get("columns")));
                    }
                    Value::String(s) => {
                        kept.entry(s.clone()).or_default();
                    }
                    _ => return Err("unrecognized table entry".into()),
                }
            }
        }
        _ => return Err("missing \"tables\"".into()),
    }
    if kept.is_empty() {
        return Err("no tables selected".into());
    }
    for cols in kept.values_mut() {
        let mut seen = BTreeSet::new();
        cols.retain(|c| seen.insert(c.to_ascii_lowercase()));
    }
    let mut join_edges = Vec::new();
    if let Some(Value::Array(edges)) = obj.get("join_edges").or_else(|| obj.get("joins")) {
        for e in edges {
            match parse_edge(e) {
                Some(fk) => join_edges.push(fk),
                None => warnings.push(format!("ignored unparseable join edge {e}")),
            }
        }
    }
    let notes = obj.get("notes").and_then(Value::as_str).map(str::to_string);
    Ok((LinkedSchema { db_id: db_id.to_string(), kept, join_edges, notes }, warnings))
}

fn parse_subproblems(raw: &str) -> Parsed<SubproblemSet> {
    let payload = extract_structured_payload(raw).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&payload).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let mut set = SubproblemSet::default();
    let mut warnings = Vec::new();
    for (k, v) in obj {
        let Some(clause) = Clause::parse(k) else {
            warnings.push(format!("dropped unknown clause key `{k}`"));
            continue;
        };
        match value_text(v).filter(|s| !s.is_empty()) {
            Some(text) if set.get(clause).is_none() => set.clauses.push((clause, text)),
            Some(_) => warnings.push(format!("dropped duplicate clause key `{k}`")),
            None => warnings.push(format!("dropped empty clause `{k}`")),
        }
    }
    set.clauses.sort_by_key(|(c, _)| *c);
    Ok((set, warnings))
}

fn parse_plan(raw: &str) -> Parsed<QueryPlan> {
    let plan = match extract_structured_payload(raw).ok().and_then(|p| serde_json::from_str::<Value>(&p).ok()) {
        Some(Value::Object(o)) => {
            let steps = string_list(o.get("steps").or_else(|| o.get("plan")));
            let rationale =
                o.get("reasoning").or_else(|| o.get("rationale")).and_then(value_text).filter(|s| !s.is_empty());
            QueryPlan { steps, rationale }
        }
        Some(Value::Array(items)) => QueryPlan {
            steps: items.iter().filter_map(value_text).filter(|s| !s.is_empty()).collect(),
            rationale: None,
        },
        _ => QueryPlan { steps: numbered_lines(raw), rationale: None },
    };
    if plan.steps.is_empty() {
        return Err("the plan has no steps".into());
    }
    let bad = plan.sql_steps();
    if !bad.is_empty() {
        let nums: Vec<String> = bad.iter().map(|i| (i + 1).to_string()).collect();
        return Err(format!(
            "step(s) {} are SQL statements; the plan must describe the procedure in plain English without SQL",
            nums.join(", ")
        ));
    }
    Ok((plan, Vec::new()))
}

fn parse_raw_sql(raw: &str) -> Parsed<String> {
    if raw.trim().is_empty() {
        return Err("the response is empty".into());
    }
    Ok((raw.to_string(), Vec::new()))
}

fn parse_correction(raw: &str, taxonomy: &Taxonomy) -> Parsed<CorrectionPlan> {
    let codes = taxonomy.parse_codes(raw);
    let (steps, rationale) =
        match extract_structured_payload(raw).ok().and_then(|p| serde_json::from_str::<Value>(&p).ok()) {
            Some(Value::Object(o)) => (
                string_list(o.get("repair_steps").or_else(|| o.get("steps"))),
                o.get("reasoning").or_else(|| o.get("rationale")).and_then(value_text).unwrap_or_default(),
            ),
            _ => (numbered_lines(raw), raw.trim().to_string()),
        };
    if steps.is_empty() {
        return Err("no repair steps found".into());
    }
    let mut warnings = Vec::new();
    if !codes.unknown.is_empty() {
        warnings.push(format!("unknown taxonomy codes: {}", codes.unknown.join(", ")));
    }
    Ok((
        CorrectionPlan { diagnosed_codes: codes.known, unknown_codes: codes.unknown, repair_steps: steps, rationale },
        warnings,
    ))
}

// ---------------------------------------------------------------------------
// Trace records and the agent runner
// ---------------------------------------------------------------------------

/// One gateway call made by an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub role: AgentRole,
    /// 0 for the first ask, 1 for the format re-ask.
    pub call: u8,
    /// Correction round (1-based) for correction agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub model: String,
    pub prompt: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_digest: Option<String>,
    pub usage: Usage,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{role} stage failed: {message}")]
pub struct StageError {
    pub role: AgentRole,
    pub message: String,
    pub raw_response: Option<String>,
}

fn digest<T: Serialize>(artifact: &T) -> String {
    let bytes = serde_json::to_vec(artifact).unwrap_or_default();
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Everything an agent call needs besides its inputs.
pub struct Agents<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub taxonomy: &'a Taxonomy,
}

const FORMAT_REMINDER: &str = "Your previous reply could not be used";

impl<'a> Agents<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, taxonomy: &'a Taxonomy) -> Self {
        Self { gateway, templates, taxonomy }
    }

    fn ask<T: Serialize>(
        &self,
        role: AgentRole,
        bindings: &Bindings,
        round: Option<u32>,
        trace: &mut Vec<StageRecord>,
        parse: impl Fn(&str) -> Parsed<T>,
    ) -> Result<T, StageError> {
        let stage_err = |message: String, raw: Option<String>| StageError { role, message, raw_response: raw };
        let mut messages = self.templates.get(role).render(bindings).map_err(|e| stage_err(e.to_string(), None))?;

        for call in 0..2u8 {
            let request = self.gateway.request(role, messages.clone());
            let started = Instant::now();
            let result = self.gateway.complete(role, &request);
            let mut record = StageRecord {
                role,
                call,
                round,
                model: request.model_id.clone(),
                prompt: messages.clone(),
                response: None,
                artifact_digest: None,
                usage: Usage::default(),
                wall_ms: 0,
                warnings: Vec::new(),
                error: None,
            };
            let response = match result {
                Ok(r) => r,
                Err(e) => {
                    record.wall_ms = started.elapsed().as_millis() as u64;
                    record.error = Some(e.to_string());
                    trace.push(record);
                    return Err(stage_err(e.to_string(), None));
                }
            };
            record.wall_ms = started.elapsed().as_millis() as u64;
            record.usage = response.usage;
            record.response = Some(response.content.clone());
            match parse(&response.content) {
                Ok((artifact, warnings)) => {
                    record.artifact_digest = Some(digest(&artifact));
                    record.warnings = warnings;
                    trace.push(record);
                    return Ok(artifact);
                }
                Err(reason) => {
                    record.error = Some(reason.clone());
                    trace.push(record);
                    if call == 1 {
                        return Err(stage_err(reason, Some(response.content)));
                    }
                    messages.push(Message::assistant(response.content));
                    messages.push(Message::user(format!(
                        "{FORMAT_REMINDER}: {reason}. Reply again following the required format exactly."
                    )));
                }
            }
        }
        unreachable!("loop returns on the second call")
    }

    pub fn run_schema_linking(
        &self,
        question: &str,
        schema: &DatabaseSchema,
        schema_text: &str,
        policy: LinkPolicy,
        trace: &mut Vec<StageRecord>,
    ) -> Result<LinkOutcome, StageError> {
        let b = Bindings::new().set(Placeholder::Question, question).set(Placeholder::Schema, schema_text);
        let link = self.ask(AgentRole::SchemaLinking, &b, None, trace, |raw| parse_link(raw, &schema.db_id))?;
        let validation = validate_linked_schema(schema, &link, policy);
        if let Some(rec) = trace.last_mut() {
            match &validation {
                Ok(v) => rec.warnings.extend(v.warnings.iter().map(|w| w.to_string())),
                Err(errs) => rec.warnings.extend(errs.iter().map(|w| format!("invalid link: {w}"))),
            }
        }
        Ok(LinkOutcome { link, validation })
    }

    pub fn run_subproblem(
        &self,
        question: &str,
        linked_text: &str,
        trace: &mut Vec<StageRecord>,
    ) -> Result<SubproblemSet, StageError> {
        let b = Bindings::new().set(Placeholder::Question, question).set(Placeholder::Schema, linked_text);
        self.ask(AgentRole::Subproblem, &b, None, trace, parse_subproblems)
    }

    pub fn run_query_plan(
        &self,
        question: &str,
        linked_text: &str,
        subproblems: &SubproblemSet,
        trace: &mut Vec<StageRecord>,
    ) -> Result<QueryPlan, StageError> {
        let b = Bindings::new()
            .set(Placeholder::Question, question)
            .set(Placeholder::Schema, linked_text)
            .set(Placeholder::Subproblems, subproblems.render());
        self.ask(AgentRole::QueryPlan, &b, None, trace, parse_plan)
    }

    /// Returns the raw reply; sanitizing is the caller's job. When
    /// `schema_text` is given it is bound to `{schema}` and, if the template
    /// does not use it, appended to the prompt.
    pub fn run_sql(
        &self,
        question: &str,
        plan_text: &str,
        subproblems_text: &str,
        schema_text: Option<&str>,
        trace: &mut Vec<StageRecord>,
    ) -> Result<String, StageError> {
        let mut question_binding = question.to_string();
        let template = self.templates.get(AgentRole::Sql);
        if let Some(s) = schema_text {
            if !template.placeholders().contains(&Placeholder::Schema) {
                question_binding = format!("{question}\n\nRelevant schema:\n{s}");
            }
        }
        let b = Bindings::new()
            .set(Placeholder::Question, question_binding)
            .set(Placeholder::Plan, plan_text)
            .set(Placeholder::Subproblems, subproblems_text)
            .set(Placeholder::Schema, schema_text.unwrap_or(""));
        self.ask(AgentRole::Sql, &b, None, trace, parse_raw_sql)
    }

    pub fn run_correction_plan(
        &self,
        question: &str,
        linked_text: &str,
        failed_sql: &str,
        exec_feedback: &str,
        round: u32,
        trace: &mut Vec<StageRecord>,
    ) -> Result<CorrectionPlan, StageError> {
        let b = Bindings::new()
            .set(Placeholder::Question, question)
            .set(Placeholder::Schema, linked_text)
            .set(Placeholder::FailedSql, failed_sql)
            .set(Placeholder::ExecFeedback, exec_feedback)
            .set(Placeholder::Taxonomy, self.taxonomy.render_summary());
        self.ask(AgentRole::CorrectionPlan, &b, Some(round), trace, |raw| parse_correction(raw, self.taxonomy))
    }

    pub fn run_correction_sql(
        &self,
        question: &str,
        linked_text: &str,
        plan: &CorrectionPlan,
        failed_sql: &str,
        round: u32,
        trace: &mut Vec<StageRecord>,
    ) -> Result<String, StageError> {
        let b = Bindings::new()
            .set(Placeholder::Question, question)
            .set(Placeholder::Schema, linked_text)
            .set(Placeholder::FailedSql, failed_sql)
            .set(Placeholder::CorrectionPlan, plan.render());
        self.ask(AgentRole::CorrectionSql, &b, Some(round), trace, parse_raw_sql)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_structured_payload("Here you go:\n```json\n{\"a\": 1}\n```").unwrap(), "{\"a\": 1}");
        assert_eq!(extract_structured_payload("{\"a\": [1, 2]} and that is all {folks}").unwrap(), "{\"a\": [1, 2]}");
        assert_eq!(extract_structured_payload("He said \"use {braces} here\" and left."), Err(ExtractError));
        assert_eq!(extract_structured_payload("{\"a\": 1,}").unwrap(), "{\"a\": 1}");
        assert_eq!(extract_structured_payload("no json"), Err(ExtractError));
    }

    #[test]
    fn braces_inside_json_strings() {
        let raw = "ok: {\"notes\": \"a } b\", \"x\": 1} trailing";
        assert_eq!(extract_structured_payload(raw).unwrap(), "{\"notes\": \"a } b\", \"x\": 1}");
    }

    #[test]
    fn clause_key_normalization() {
        assert_eq!(Clause::parse("group_by"), Some(Clause::GroupBy));
        assert_eq!(Clause::parse("Order By"), Some(Clause::OrderBy));
        assert_eq!(Clause::parse("ORDERBY"), Some(Clause::OrderBy));
        assert_eq!(Clause::parse("WINDOW"), None);
    }

    #[test]
    fn subproblems_drop_unknown_keys() {
        let (set, warnings) =
            parse_subproblems("{\"SELECT\": \"COUNT(*)\", \"WINDOW\": \"w\", \"FROM\": \"singer\"}").unwrap();
        assert_eq!(set.clauses, vec![(Clause::Select, "COUNT(*)".to_string()), (Clause::From, "singer".to_string())]);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("WINDOW"));

        let (empty, _) = parse_subproblems("{}").unwrap();
        assert!(empty.clauses.is_empty());
    }

    #[test]
    fn plan_rejects_sql_steps() {
        let err = parse_plan("{\"steps\": [\"Find singers\", \"SELECT name FROM singer\"]}").unwrap_err();
        assert!(err.contains("step(s) 2"));
        let err = parse_plan("{\"steps\": [\"1. SELECT name FROM singer;\"]}").unwrap_err();
        assert!(err.contains("step(s) 1"));
        let (p, _) = parse_plan(
            "{\"reasoning\": \"r\", \"steps\": [\"Identify the singer table\", \"Join concert on singer_id\", \"Filter to 2014\", \"Count rows\"]}",
        )
        .unwrap();
        assert_eq!(p.steps.len(), 4);
        assert_eq!(p.rationale.as_deref(), Some("r"));
    }

    #[test]
    fn plan_from_numbered_prose() {
        let (p, _) = parse_plan("Plan:\n1. Read the singer table\n2. Count the rows\n").unwrap();
        assert_eq!(p.steps, ["Read the singer table", "Count the rows"]);
        assert!(parse_plan("").is_err());
    }

    #[test]
    fn prose_steps_are_not_sql() {
        for s in [
            "Select the name column",
            "Show tables that matter",
            "Explain the reasoning",
            "Step 2: filter rows where age > 20",
            "Order by age descending and limit to 1",
        ] {
            assert!(!step_is_sql(s), "{s}");
        }
        assert!(step_is_sql("Step 3: SELECT COUNT(*) FROM singer"));
        assert!(step_is_sql("`SELECT 1`"));
    }

    #[test]
    fn link_parsing_variants() {
        let raw = "```json\n{\"tables\": {\"singer\": [\"name\", \"Name\"]}, \"join_edges\": [\"concert.singer_id = singer.id\", [\"a.b\", \"c.d\"]], \"notes\": \"n\"}\n```";
        let (l, w) = parse_link(raw, "db").unwrap();
        assert_eq!(l.kept["singer"], ["name"]);
        assert_eq!(l.join_edges.len(), 2);
        assert!(w.is_empty());
        assert!(parse_link("{\"tables\": {}}", "db").is_err());
        assert!(parse_link("{\"notes\": \"x\"}", "db").is_err());
    }

    #[test]
    fn correction_parsing() {
        let t = crate::taxonomy::default_taxonomy();
        let (p, w) = parse_correction(
            "{\"error_codes\": [\"SCH-01\", \"FAKE-99\"], \"reasoning\": \"column typo\", \"repair_steps\": [\"use age\", \"rerun\"]}",
            &t,
        )
        .unwrap();
        assert_eq!(p.diagnosed_codes.iter().map(|c| c.code).collect::<Vec<_>>(), ["SCH-01"]);
        assert_eq!(p.unknown_codes, ["FAKE-99"]);
        assert_eq!(p.repair_steps.len(), 2);
        assert_eq!(w.len(), 1);
        assert!(parse_correction("{\"repair_steps\": []}", &t).is_err());
    }

    #[test]
    fn template_parsing_errors() {
        assert!(PromptTemplate::parse(AgentRole::Sql, "### user\n{nope}").is_err());
        assert!(PromptTemplate::parse(AgentRole::SchemaLinking, "### user\n{failed_sql}").is_err());
        assert!(PromptTemplate::parse(AgentRole::Sql, "### user\n{plan").is_err());
        assert!(PromptTemplate::parse(AgentRole::Sql, "### user\na } b").is_err());
        assert!(PromptTemplate::parse(AgentRole::Sql, "### system\nonly system").is_err());
        let t = PromptTemplate::parse(AgentRole::Sql, "### user\n{{literal}} {plan}").unwrap();
        let msgs = t.render(&Bindings::new().set(Placeholder::Plan, "P")).unwrap();
        assert_eq!(msgs, vec![Message::user("{literal} P")]);
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let t = PromptTemplate::parse(AgentRole::Sql, "### user\n{plan}").unwrap();
        assert!(matches!(t.render(&Bindings::new()), Err(TemplateError::Unbound { .. })));
    }

    #[test]
    fn default_templates_render_without_braces() {
        let set = TemplateSet::default();
        let mut b = Bindings::new();
        for p in Placeholder::ALL {
            b = b.set(p, format!("value of {}", p.name()));
        }
        for role in AgentRole::ALL {
            let msgs = set.get(role).render(&b).unwrap();
            for m in msgs {
                assert!(!m.content.contains('{') && !m.content.contains('}'), "{role}");
            }
        }
    }
}
