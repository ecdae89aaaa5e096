//! Sanitizing model-generated SQL, executing it read-only against SQLite
//! files, and deciding execution-result equivalence.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use rusqlite::limits::Limit;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::ser::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use sqlparser::ast::Statement;
use sqlparser::dialect::SQLiteDialect;
use sqlparser::keywords::Keyword;
use sqlparser::parser::Parser;
use sqlparser::tokenizer::{Token, Tokenizer};
use thiserror::Error;

/// Default per-query execution budget.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SanitizeError {
    #[error("response is empty")]
    Empty,
    #[error("no SQL statement found in response")]
    NoSql,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot open database {path}: {message}")]
    Open { path: String, message: String },
}

/// A single sanitized statement: non-empty, no trailing semicolon, no code
/// fences.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SqlQuery(String);

impl SqlQuery {
    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Wraps text that is already known to be a clean statement (e.g. a gold
    /// query from a dataset). Trailing semicolons and whitespace are removed.
    pub fn trusted(text: &str) -> Option<Self> {
        let t = text.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace());
        if t.is_empty() {
            None
        } else {
            Some(Self(t.to_string()))
        }
    }
}

impl fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sanitizer output plus anything it threw away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sanitized {
    pub query: SqlQuery,
    /// Statements after the first one, dropped.
    pub dropped_statements: Vec<String>,
}

fn keyword_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(select|with|values)\b").expect("valid keyword regex"))
}

/// Returns the body of the first fenced block that contains a SQL keyword,
/// else the whole text.
fn strip_fences(raw: &str) -> &str {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // The info string (e.g. `sql`) runs to the end of the fence line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                blocks.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks.iter().find(|b| keyword_pattern().is_match(b)).copied().unwrap_or(raw)
}

/// Splits at top-level semicolons, respecting quotes and comments.
fn split_statements(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut parts = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            q @ (b'\'' | b'"' | b'`') => {
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == q {
                        // Doubled quote is an escape.
                        if bytes.get(i + 1) == Some(&q) {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
            }
            b'[' => {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            b';' => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(&text[start.min(text.len())..]);
    parts
}

/// True when `sql` parses as exactly one statement.
fn parses_as_statement(sql: &str) -> Option<Statement> {
    let mut stmts = Parser::parse_sql(&SQLiteDialect {}, sql).ok()?;
    if stmts.len() == 1 {
        stmts.pop()
    } else {
        None
    }
}

fn parses_as_query(sql: &str) -> bool {
    matches!(parses_as_statement(sql), Some(Statement::Query(_)))
}

/// True when `text` on its own is a complete query or data-modifying
/// statement under a permissive SQLite grammar.
pub fn is_complete_statement(text: &str) -> bool {
    let t = text.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace());
    matches!(
        parses_as_statement(t),
        Some(Statement::Query(_) | Statement::Insert(_) | Statement::Update(_) | Statement::Delete(_))
    )
}

/// The statement starting at `from`, trimmed of trailing prose where that
/// makes it parse. Second value reports whether the result parses.
fn statement_at(text: &str, from: usize) -> (String, bool, Vec<String>) {
    let mut parts = split_statements(&text[from..]).into_iter();
    let first = parts.next().unwrap_or("").trim();
    let dropped: Vec<String> = parts.map(str::trim).filter(|p| !p.is_empty()).map(str::to_string).collect();
    if parses_as_query(first) {
        return (first.to_string(), true, dropped);
    }
    let lines: Vec<&str> = first.lines().collect();
    for n in (1..lines.len()).rev() {
        let candidate = lines[..n].join("\n");
        let candidate = candidate.trim();
        if parses_as_query(candidate) {
            return (candidate.to_string(), true, dropped);
        }
    }
    (first.to_string(), false, dropped)
}

/// Cleans a raw model response down to one SQL statement.
pub fn sanitize(raw: &str) -> Result<SqlQuery, SanitizeError> {
    sanitize_detailed(raw).map(|s| s.query)
}

pub fn sanitize_detailed(raw: &str) -> Result<Sanitized, SanitizeError> {
    if raw.trim().is_empty() {
        return Err(SanitizeError::Empty);
    }
    let body = strip_fences(raw);
    let starts: Vec<(usize, bool)> = keyword_pattern()
        .find_iter(body)
        .map(|m| {
            let upper = m.as_str().chars().all(|c| c.is_ascii_uppercase());
            (m.start(), upper)
        })
        .collect();

    // Upper-case keywords are likelier to start real SQL than prose like
    // "a select statement", which can itself parse.
    let mut chosen = None;
    for want_upper in [true, false] {
        for &(pos, upper) in &starts {
            if want_upper && !upper {
                continue;
            }
            let (stmt, ok, dropped) = statement_at(body, pos);
            if ok {
                chosen = Some((stmt, dropped));
                break;
            }
        }
        if chosen.is_some() {
            break;
        }
    }
    if chosen.is_none() {
        if let Some(&(pos, _)) = starts.iter().find(|(_, upper)| *upper) {
            let (stmt, _, dropped) = statement_at(body, pos);
            chosen = Some((stmt, dropped));
        }
    }
    let (stmt, dropped) = chosen.ok_or(SanitizeError::NoSql)?;
    let text = stmt.replace("```", "");
    let text = text.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace());
    if text.is_empty() {
        return Err(SanitizeError::NoSql);
    }
    Ok(Sanitized { query: SqlQuery(text.to_string()), dropped_statements: dropped })
}

/// True iff an `ORDER BY` appears outside every parenthesized group.
/// Untokenizable input yields `false`.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let Ok(tokens) = Tokenizer::new(&SQLiteDialect {}, sql).tokenize() else {
        return false;
    };
    let mut depth = 0i32;
    let mut prev_order = false;
    for tok in tokens {
        match tok {
            Token::Whitespace(_) => continue,
            Token::LParen => depth += 1,
            Token::RParen => depth -= 1,
            Token::Word(ref w) if depth == 0 && w.quote_style.is_none() => {
                if prev_order && w.keyword == Keyword::BY {
                    return true;
                }
                prev_order = w.keyword == Keyword::ORDER;
                continue;
            }
            _ => {}
        }
        prev_order = false;
    }
    false
}

// ---------------------------------------------------------------------------
// Values and outcomes
// ---------------------------------------------------------------------------

/// A canonical result cell. Integral reals are stored as integers so `6`
/// and `6.0` compare equal; text compares byte-wise.
#[derive(Debug, Clone)]
pub enum ScalarValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(Vec<u8>),
    BlobDigest(String),
}

impl ScalarValue {
    pub fn real(r: f64) -> Self {
        // i64::MAX as f64 rounds up to 2^63, which is out of range.
        if r.fract() == 0.0 && (-9.223_372_036_854_776e18..9.223_372_036_854_776e18).contains(&r) {
            ScalarValue::Integer(r as i64)
        } else {
            ScalarValue::Real(r)
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        ScalarValue::Text(s.into().into_bytes())
    }

    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => ScalarValue::Null,
            ValueRef::Integer(i) => ScalarValue::Integer(i),
            ValueRef::Real(r) => ScalarValue::real(r),
            ValueRef::Text(t) => ScalarValue::Text(t.to_vec()),
            ValueRef::Blob(b) => ScalarValue::BlobDigest(hex::encode(Sha256::digest(b))),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            ScalarValue::Null => 0,
            ScalarValue::Integer(_) => 1,
            ScalarValue::Real(_) => 2,
            ScalarValue::Text(_) => 3,
            ScalarValue::BlobDigest(_) => 4,
        }
    }
}

impl PartialEq for ScalarValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ScalarValue {}

impl PartialOrd for ScalarValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order used for bag comparison; not SQL collation.
impl Ord for ScalarValue {
    fn cmp(&self, other: &Self) -> Ordering {
        use ScalarValue::*;
        match (self, other) {
            (Null, Null) => Ordering::Equal,
            (Integer(a), Integer(b)) => a.cmp(b),
            (Real(a), Real(b)) => a.total_cmp(b),
            (Text(a), Text(b)) => a.cmp(b),
            (BlobDigest(a), BlobDigest(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl fmt::Display for ScalarValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarValue::Null => f.write_str("NULL"),
            ScalarValue::Integer(i) => write!(f, "{i}"),
            ScalarValue::Real(r) => write!(f, "{r}"),
            ScalarValue::Text(t) => f.write_str(&String::from_utf8_lossy(t)),
            ScalarValue::BlobDigest(d) => write!(f, "<blob {}>", &d[..12.min(d.len())]),
        }
    }
}

impl Serialize for ScalarValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ScalarValue::Null => s.serialize_none(),
            ScalarValue::Integer(i) => s.serialize_i64(*i),
            ScalarValue::Real(r) => s.serialize_f64(*r),
            ScalarValue::Text(t) => s.serialize_str(&String::from_utf8_lossy(t)),
            ScalarValue::BlobDigest(d) => s.serialize_str(&format!("blob:{d}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Syntax,
    MissingEntity,
    Type,
    Other,
}

impl FailureKind {
    /// Classifies a SQLite error message.
    pub fn classify(message: &str) -> Self {
        let m = message.to_ascii_lowercase();
        if m.contains("syntax error") || m.contains("incomplete input") || m.contains("unrecognized token") {
            FailureKind::Syntax
        } else if m.contains("no such table")
            || m.contains("no such column")
            || m.contains("no such function")
            || m.contains("ambiguous column")
        {
            FailureKind::MissingEntity
        } else if m.contains("datatype mismatch") || m.contains("type mismatch") {
            FailureKind::Type
        } else {
            FailureKind::Other
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureKind::Syntax => "syntax",
            FailureKind::MissingEntity => "missing_entity",
            FailureKind::Type => "type",
            FailureKind::Other => "other",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Success { rows: Vec<Vec<ScalarValue>>, column_count: usize },
    Failure { kind: FailureKind, message: String },
    Timeout,
}

impl ExecutionOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, ExecutionOutcome::Success { .. })
    }

    /// One-paragraph description for correction prompts.
    pub fn describe(&self, preview_rows: usize) -> String {
        match self {
            ExecutionOutcome::Success { rows, column_count } => {
                let mut s = format!("Query executed and returned {} row(s) with {column_count} column(s).", rows.len());
                if !rows.is_empty() && preview_rows > 0 {
                    s.push_str(" First rows:");
                    for r in rows.iter().take(preview_rows) {
                        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                        s.push_str(&format!("\n  ({})", cells.join(", ")));
                    }
                }
                s
            }
            ExecutionOutcome::Failure { kind, message } => format!("Execution failed ({kind} error): {message}"),
            ExecutionOutcome::Timeout => "Execution timed out.".to_string(),
        }
    }
}

fn open_read_only(db_file: &Path) -> Result<Connection, ExecError> {
    let err = |message: String| ExecError::Open { path: db_file.display().to_string(), message };
    if !db_file.is_file() {
        return Err(err("not a file".into()));
    }
    let conn = Connection::open_with_flags(db_file, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
        .map_err(|e| err(e.to_string()))?;
    conn.execute_batch("PRAGMA query_only = ON;").map_err(|e| err(e.to_string()))?;
    // ATTACH counts as read-only to SQLite but can reach other files.
    conn.set_limit(Limit::SQLITE_LIMIT_ATTACHED, 0).map_err(|e| err(e.to_string()))?;
    Ok(conn)
}

/// Runs `query` read-only, materializing every row. Engine errors and
/// timeouts come back inside the outcome; only an unopenable file is an
/// `Err`.
pub fn execute(db_file: impl AsRef<Path>, query: &SqlQuery, timeout: Duration) -> Result<ExecutionOutcome, ExecError> {
    let conn = open_read_only(db_file.as_ref())?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline))
        .map_err(|e| ExecError::Open { path: db_file.as_ref().display().to_string(), message: e.to_string() })?;
    Ok(run(&conn, query.text(), deadline))
}

fn run(conn: &Connection, sql: &str, deadline: Instant) -> ExecutionOutcome {
    let failure = |e: rusqlite::Error| {
        if Instant::now() >= deadline
            || matches!(e.sqlite_error_code(), Some(rusqlite::ErrorCode::OperationInterrupted))
        {
            return ExecutionOutcome::Timeout;
        }
        let message = e.to_string();
        ExecutionOutcome::Failure { kind: FailureKind::classify(&message), message }
    };
    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => return failure(e),
    };
    if !stmt.readonly() {
        return ExecutionOutcome::Failure {
            kind: FailureKind::Other,
            message: "statement would modify the database; only queries are allowed".into(),
        };
    }
    let column_count = stmt.column_count();
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => return failure(e),
    };
    let mut out = Vec::new();
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut vals = Vec::with_capacity(column_count);
                for i in 0..column_count {
                    match row.get_ref(i) {
                        Ok(v) => vals.push(ScalarValue::from_ref(v)),
                        Err(e) => return failure(e),
                    }
                }
                out.push(vals);
            }
            Ok(None) => break,
            Err(e) => return failure(e),
        }
    }
    ExecutionOutcome::Success { rows: out, column_count }
}

/// Execution-accuracy verdict for one pair of outcomes.
///
/// Any failure or timeout is a mismatch. Column count and column order
/// matter. Row comparison is sequence equality when `order_sensitive`,
/// multiset equality otherwise; duplicates count in both modes.
pub fn compare_results(gold: &ExecutionOutcome, pred: &ExecutionOutcome, order_sensitive: bool) -> bool {
    let (
        ExecutionOutcome::Success { rows: g, column_count: gc },
        ExecutionOutcome::Success { rows: p, column_count: pc },
    ) = (gold, pred)
    else {
        return false;
    };
    if gc != pc || g.len() != p.len() {
        return false;
    }
    if order_sensitive {
        return g == p;
    }
    let mut g: Vec<&Vec<ScalarValue>> = g.iter().collect();
    let mut p: Vec<&Vec<ScalarValue>> = p.iter().collect();
    g.sort();
    p.sort();
    g == p
}

/// Compares with order sensitivity taken from the gold query.
pub fn execution_match(gold_sql: &str, gold: &ExecutionOutcome, pred: &ExecutionOutcome) -> bool {
    compare_results(gold, pred, has_top_level_order_by(gold_sql))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> String {
        sanitize(s).unwrap().into_string()
    }

    #[test]
    fn fenced_block() {
        assert_eq!(q("```sql\nSELECT * FROM t;\n```"), "SELECT * FROM t");
    }

    #[test]
    fn prose_around_statement() {
        assert_eq!(q("Sure! The query is: SELECT name FROM singer ; hope that helps"), "SELECT name FROM singer");
    }

    #[test]
    fn refusal() {
        assert_eq!(sanitize("I cannot answer that."), Err(SanitizeError::NoSql));
        assert_eq!(sanitize("   \n"), Err(SanitizeError::Empty));
    }

    #[test]
    fn extra_statements_dropped() {
        let s = sanitize_detailed("SELECT 1; SELECT 2;").unwrap();
        assert_eq!(s.query.text(), "SELECT 1");
        assert_eq!(s.dropped_statements, ["SELECT 2"]);
    }

    #[test]
    fn semicolon_in_string_is_not_a_separator() {
        assert_eq!(q("SELECT name FROM t WHERE x = 'a;b';"), "SELECT name FROM t WHERE x = 'a;b'");
    }

    #[test]
    fn order_by_detection() {
        assert!(has_top_level_order_by("SELECT a FROM t ORDER BY a"));
        assert!(!has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a) LIMIT 3"));
        assert!(!has_top_level_order_by("SELECT a FROM t"));
        assert!(has_top_level_order_by("select a from t order   by a desc limit 1"));
        assert!(!has_top_level_order_by("SELECT \"order\" FROM t WHERE by = 1"));
        assert!(!has_top_level_order_by("SELECT rank() OVER (ORDER BY a) FROM t"));
        assert!(has_top_level_order_by("SELECT a FROM t UNION SELECT b FROM u ORDER BY 1"));
    }

    #[test]
    fn canonical_numbers() {
        assert_eq!(ScalarValue::real(6.0), ScalarValue::Integer(6));
        assert_ne!(ScalarValue::Integer(6), ScalarValue::text("6"));
        assert_eq!(ScalarValue::real(6.5), ScalarValue::Real(6.5));
        assert_eq!(ScalarValue::real(-0.0), ScalarValue::Integer(0));
        assert!(matches!(ScalarValue::real(1e19), ScalarValue::Real(_)));
    }

    #[test]
    fn classification() {
        assert_eq!(FailureKind::classify("near \"FORM\": syntax error"), FailureKind::Syntax);
        assert_eq!(FailureKind::classify("no such table: nonexistent"), FailureKind::MissingEntity);
        assert_eq!(FailureKind::classify("no such column: singer.agee"), FailureKind::MissingEntity);
        assert_eq!(FailureKind::classify("datatype mismatch"), FailureKind::Type);
        assert_eq!(FailureKind::classify("misuse of aggregate: count()"), FailureKind::Other);
    }

    fn ok(rows: Vec<Vec<ScalarValue>>) -> ExecutionOutcome {
        let column_count = rows.first().map_or(0, Vec::len);
        ExecutionOutcome::Success { rows, column_count }
    }

    #[test]
    fn comparator_rules() {
        let i = ScalarValue::Integer;
        let t = ScalarValue::text;
        let a = ok(vec![vec![t("a"), i(1)], vec![t("b"), i(2)]]);
        let b = ok(vec![vec![t("b"), i(2)], vec![t("a"), i(1)]]);
        assert!(compare_results(&a, &b, false));
        assert!(!compare_results(&a, &b, true));
        assert!(compare_results(&ok(vec![vec![i(6)]]), &ok(vec![vec![i(6)]]), true));

        let dup = ok(vec![vec![t("a")], vec![t("a")]]);
        let single = ok(vec![vec![t("a")]]);
        assert!(!compare_results(&dup, &single, false));

        let timeout = ExecutionOutcome::Timeout;
        assert!(!compare_results(&timeout, &timeout, false));

        let empty0 = ExecutionOutcome::Success { rows: vec![], column_count: 1 };
        let empty1 = ExecutionOutcome::Success { rows: vec![], column_count: 2 };
        assert!(!compare_results(&empty0, &empty1, false));
    }
}
