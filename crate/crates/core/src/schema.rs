//! Database schemas: loading from a benchmark tables file, introspection of
//! SQLite files, validation of schema-linking crops, and prompt rendering.
//!
//! Identifiers are matched case-insensitively everywhere; the casing found in
//! the source catalog is what gets rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tables file: {0}")]
    Format(String),
    #[error("malformed tables entry #{index}: {message}")]
    Entry { index: usize, message: String },
    #[error("invalid schema for `{db_id}`: {message}")]
    Validation { db_id: String, message: String },
    #[error("cannot open database {path}: {message}")]
    Open { path: String, message: String },
}

/// The closed set of coarse column types used by the benchmark's tables file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicalType {
    Text,
    Number,
    Time,
    Boolean,
    Others,
}

impl LogicalType {
    pub fn as_str(self) -> &'static str {
        match self {
            LogicalType::Text => "text",
            LogicalType::Number => "number",
            LogicalType::Time => "time",
            LogicalType::Boolean => "boolean",
            LogicalType::Others => "others",
        }
    }

    /// Parses the tables-file spelling. Unknown spellings are rejected.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Some(LogicalType::Text),
            "number" => Some(LogicalType::Number),
            "time" => Some(LogicalType::Time),
            "boolean" => Some(LogicalType::Boolean),
            "others" => Some(LogicalType::Others),
            _ => None,
        }
    }

    /// Maps a declared SQLite column type onto the coarse set. Blobs and
    /// untyped columns land in `Others`.
    pub fn from_declared(decl: &str) -> Self {
        let d = decl.to_ascii_lowercase();
        if d.contains("bool") || d == "bit" {
            LogicalType::Boolean
        } else if d.contains("date") || d.contains("time") || d.contains("year") {
            LogicalType::Time
        } else if d.contains("char") || d.contains("clob") || d.contains("text") || d.contains("string") {
            LogicalType::Text
        } else if d.contains("int")
            || d.contains("real")
            || d.contains("floa")
            || d.contains("doub")
            || d.contains("num")
            || d.contains("dec")
            || d.contains("money")
        {
            LogicalType::Number
        } else {
            LogicalType::Others
        }
    }
}

impl fmt::Display for LogicalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub ty: LogicalType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub primary_keys: Vec<String>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn is_primary_key(&self, column: &str) -> bool {
        self.primary_keys.iter().any(|k| k.eq_ignore_ascii_case(column))
    }
}

/// A `table.column` reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self { table: table.into(), column: column.into() }
    }

    /// Parses `table.column`, tolerating surrounding whitespace and quotes.
    pub fn parse(s: &str) -> Option<Self> {
        let (t, c) = s.trim().split_once('.')?;
        let clean = |x: &str| x.trim().trim_matches(|ch| ch == '"' || ch == '`' || ch == '[' || ch == ']').to_string();
        let (t, c) = (clean(t), clean(c));
        if t.is_empty() || c.is_empty() {
            return None;
        }
        Some(Self::new(t, c))
    }

    fn same_as(&self, other: &ColumnRef) -> bool {
        self.table.eq_ignore_ascii_case(&other.table) && self.column.eq_ignore_ascii_case(&other.column)
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// Directed foreign key `from` → `to`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from: ColumnRef,
    pub to: ColumnRef,
}

impl ForeignKey {
    pub fn new(from: ColumnRef, to: ColumnRef) -> Self {
        Self { from, to }
    }

    /// Same edge, in either direction.
    pub fn connects(&self, other: &ForeignKey) -> bool {
        (self.from.same_as(&other.from) && self.to.same_as(&other.to))
            || (self.from.same_as(&other.to) && self.to.same_as(&other.from))
    }
}

impl fmt::Display for ForeignKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.from, self.to)
    }
}

/// A full database catalog. Immutable once validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl DatabaseSchema {
    /// Builds a schema and checks every catalog invariant.
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKey>,
    ) -> Result<Self, SchemaError> {
        let schema = Self { db_id: db_id.into(), tables, foreign_keys };
        schema.check()?;
        Ok(schema)
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn resolve(&self, r: &ColumnRef) -> Option<(&TableDef, &ColumnDef)> {
        let t = self.table(&r.table)?;
        Some((t, t.column(&r.column)?))
    }

    pub fn has_foreign_key(&self, edge: &ForeignKey) -> bool {
        self.foreign_keys.iter().any(|fk| fk.connects(edge))
    }

    /// A crop that keeps every table, column, and foreign key.
    pub fn full_link(&self) -> LinkedSchema {
        LinkedSchema {
            db_id: self.db_id.clone(),
            kept: self
                .tables
                .iter()
                .map(|t| (t.name.clone(), t.columns.iter().map(|c| c.name.clone()).collect()))
                .collect(),
            join_edges: self.foreign_keys.clone(),
            notes: None,
        }
    }

    fn invalid(&self, message: String) -> SchemaError {
        SchemaError::Validation { db_id: self.db_id.clone(), message }
    }

    fn check(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.to_ascii_lowercase()) {
                return Err(self.invalid(format!("duplicate table `{}`", t.name)));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return Err(self.invalid(format!("duplicate column `{}.{}`", t.name, c.name)));
                }
            }
            for pk in &t.primary_keys {
                if t.column(pk).is_none() {
                    return Err(self.invalid(format!("primary key `{}.{}` is not a column", t.name, pk)));
                }
            }
        }
        for fk in &self.foreign_keys {
            for end in [&fk.from, &fk.to] {
                if self.resolve(end).is_none() {
                    return Err(self.invalid(format!("foreign key endpoint `{end}` does not exist")));
                }
            }
        }
        Ok(())
    }
}

/// The schema-linking agent's crop of a [`DatabaseSchema`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSchema {
    pub db_id: String,
    pub kept: BTreeMap<String, Vec<String>>,
    pub join_edges: Vec<ForeignKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownTable,
    UnknownColumn,
    NonForeignKeyEdge,
    EdgeEndpointNotKept,
    EmptyLink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkViolation {
    pub kind: ViolationKind,
    pub entity: String,
}

impl fmt::Display for LinkViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::UnknownTable => "unknown table",
            ViolationKind::UnknownColumn => "unknown column",
            ViolationKind::NonForeignKeyEdge => "join edge is not a declared foreign key",
            ViolationKind::EdgeEndpointNotKept => "join edge endpoint not kept",
            ViolationKind::EmptyLink => "no tables kept",
        };
        write!(f, "{what}: {}", self.entity)
    }
}

/// How strictly join edges must match declared foreign keys.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPolicy {
    /// When false (the default), undeclared join edges are warnings.
    pub strict_join_edges: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedLink {
    pub link: LinkedSchema,
    pub warnings: Vec<LinkViolation>,
}

/// Checks `link` against `parent`, collecting every violation rather than
/// stopping at the first.
pub fn validate_linked_schema(
    parent: &DatabaseSchema,
    link: &LinkedSchema,
    policy: LinkPolicy,
) -> Result<ValidatedLink, Vec<LinkViolation>> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    if link.kept.is_empty() {
        errors.push(LinkViolation { kind: ViolationKind::EmptyLink, entity: link.db_id.clone() });
    }
    for (table, columns) in &link.kept {
        let Some(def) = parent.table(table) else {
            errors.push(LinkViolation { kind: ViolationKind::UnknownTable, entity: table.clone() });
            continue;
        };
        for c in columns {
            if def.column(c).is_none() {
                errors.push(LinkViolation { kind: ViolationKind::UnknownColumn, entity: format!("{table}.{c}") });
            }
        }
    }
    for edge in &link.join_edges {
        let mut endpoints_ok = true;
        for end in [&edge.from, &edge.to] {
            if parent.resolve(end).is_none() {
                endpoints_ok = false;
                let kind = if parent.table(&end.table).is_none() {
                    ViolationKind::UnknownTable
                } else {
                    ViolationKind::UnknownColumn
                };
                errors.push(LinkViolation { kind, entity: end.to_string() });
            } else if !link.keeps(end) {
                endpoints_ok = false;
                errors.push(LinkViolation { kind: ViolationKind::EdgeEndpointNotKept, entity: end.to_string() });
            }
        }
        if endpoints_ok && !parent.has_foreign_key(edge) {
            let v = LinkViolation { kind: ViolationKind::NonForeignKeyEdge, entity: edge.to_string() };
            if policy.strict_join_edges {
                errors.push(v);
            } else {
                warnings.push(v);
            }
        }
    }

    if errors.is_empty() {
        Ok(ValidatedLink { link: link.clone(), warnings })
    } else {
        Err(errors)
    }
}

impl LinkedSchema {
    pub fn keeps(&self, r: &ColumnRef) -> bool {
        self.kept
            .iter()
            .any(|(t, cols)| t.eq_ignore_ascii_case(&r.table) && cols.iter().any(|c| c.eq_ignore_ascii_case(&r.column)))
    }

    /// Drops every table, column, and edge that does not resolve against
    /// `parent`. Returns `None` when nothing survives.
    pub fn pruned(&self, parent: &DatabaseSchema) -> Option<LinkedSchema> {
        let mut kept: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (table, columns) in &self.kept {
            let Some(def) = parent.table(table) else { continue };
            let cols: Vec<String> = columns.iter().filter(|c| def.column(c).is_some()).cloned().collect();
            if !cols.is_empty() {
                kept.entry(table.clone()).or_default().extend(cols);
            }
        }
        if kept.is_empty() {
            return None;
        }
        let mut out =
            LinkedSchema { db_id: self.db_id.clone(), kept, join_edges: Vec::new(), notes: self.notes.clone() };
        out.join_edges = self
            .join_edges
            .iter()
            .filter(|e| {
                parent.resolve(&e.from).is_some()
                    && parent.resolve(&e.to).is_some()
                    && out.keeps(&e.from)
                    && out.keeps(&e.to)
            })
            .cloned()
            .collect();
        Some(out)
    }
}

// ---------------------------------------------------------------------------
// Tables file
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawTablesEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<PrimaryKeyIndex>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

/// Primary keys are column indices; composite keys appear as nested arrays
/// in some releases of the tables file.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PrimaryKeyIndex {
    Single(usize),
    Composite(Vec<usize>),
}

/// Loads every database entry from a benchmark tables file.
pub fn load_tables_json(path: impl AsRef<Path>) -> Result<Vec<DatabaseSchema>, SchemaError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    parse_tables_json(&text)
}

pub fn parse_tables_json(text: &str) -> Result<Vec<DatabaseSchema>, SchemaError> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| SchemaError::Format(e.to_string()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            let raw: RawTablesEntry =
                serde_json::from_value(v).map_err(|e| SchemaError::Entry { index, message: e.to_string() })?;
            schema_from_entry(raw)
        })
        .collect()
}

fn schema_from_entry(raw: RawTablesEntry) -> Result<DatabaseSchema, SchemaError> {
    let invalid = |message: String| SchemaError::Validation { db_id: raw.db_id.clone(), message };
    if raw.table_names_original.is_empty() {
        return Err(invalid("no tables".into()));
    }
    if raw.column_types.len() != raw.column_names_original.len() {
        return Err(invalid(format!(
            "{} column names but {} column types",
            raw.column_names_original.len(),
            raw.column_types.len()
        )));
    }

    let mut tables: Vec<TableDef> = raw
        .table_names_original
        .iter()
        .map(|name| TableDef { name: name.clone(), columns: Vec::new(), primary_keys: Vec::new() })
        .collect();

    // Column 0 is the `*` pseudo-column with table index -1.
    let mut column_refs: Vec<Option<ColumnRef>> = Vec::with_capacity(raw.column_names_original.len());
    for (i, ((table_idx, name), ty)) in raw.column_names_original.iter().zip(&raw.column_types).enumerate() {
        if *table_idx < 0 {
            column_refs.push(None);
            continue;
        }
        let t = tables
            .get_mut(*table_idx as usize)
            .ok_or_else(|| invalid(format!("column #{i} `{name}` points at missing table #{table_idx}")))?;
        let ty = LogicalType::parse(ty).ok_or_else(|| invalid(format!("column #{i} has unknown type `{ty}`")))?;
        t.columns.push(ColumnDef { name: name.clone(), ty });
        column_refs.push(Some(ColumnRef::new(t.name.clone(), name.clone())));
    }

    let lookup = |idx: usize, what: &str| -> Result<ColumnRef, SchemaError> {
        column_refs
            .get(idx)
            .cloned()
            .flatten()
            .ok_or_else(|| invalid(format!("{what} references column index {idx} which is out of range")))
    };

    for pk in &raw.primary_keys {
        let idxs = match pk {
            PrimaryKeyIndex::Single(i) => vec![*i],
            PrimaryKeyIndex::Composite(v) => v.clone(),
        };
        for idx in idxs {
            let r = lookup(idx, "primary key")?;
            let t = tables.iter_mut().find(|t| t.name == r.table).expect("column ref names a table");
            if !t.is_primary_key(&r.column) {
                t.primary_keys.push(r.column);
            }
        }
    }

    let mut foreign_keys = Vec::with_capacity(raw.foreign_keys.len());
    for (from, to) in &raw.foreign_keys {
        foreign_keys.push(ForeignKey::new(lookup(*from, "foreign key")?, lookup(*to, "foreign key")?));
    }

    DatabaseSchema::new(raw.db_id.clone(), tables, foreign_keys)
}

// ---------------------------------------------------------------------------
// Introspection
// ---------------------------------------------------------------------------

/// Reads the catalog stored in a SQLite file. The file is opened read-only.
pub fn introspect_database(db_file: impl AsRef<Path>) -> Result<DatabaseSchema, SchemaError> {
    let path = db_file.as_ref();
    let open_err = |message: String| SchemaError::Open { path: path.display().to_string(), message };
    if !path.is_file() {
        return Err(open_err("not a file".into()));
    }
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
        .map_err(|e| open_err(e.to_string()))?;

    let db_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();

    let names: Vec<String> = (|| {
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        rows.collect::<Result<Vec<_>, _>>()
    })()
    .map_err(|e| open_err(e.to_string()))?;

    let mut tables = Vec::with_capacity(names.len());
    let mut foreign_keys = Vec::new();
    for name in &names {
        let mut columns = Vec::new();
        let mut pks: Vec<(i64, String)> = Vec::new();
        {
            let mut stmt = conn
                .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
                .map_err(|e| open_err(e.to_string()))?;
            let rows = stmt
                .query_map([name], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?)))
                .map_err(|e| open_err(e.to_string()))?;
            for row in rows {
                let (col, decl, pk) = row.map_err(|e| open_err(e.to_string()))?;
                if pk > 0 {
                    pks.push((pk, col.clone()));
                }
                columns.push(ColumnDef { name: col, ty: LogicalType::from_declared(&decl) });
            }
        }
        pks.sort();
        {
            let mut stmt = conn
                .prepare(r#"SELECT "table", "from", "to" FROM pragma_foreign_key_list(?1) ORDER BY id, seq"#)
                .map_err(|e| open_err(e.to_string()))?;
            let rows = stmt
                .query_map([name], |r| {
                    Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<String>>(2)?))
                })
                .map_err(|e| open_err(e.to_string()))?;
            for row in rows {
                let (target, from, to) = row.map_err(|e| open_err(e.to_string()))?;
                foreign_keys.push((name.clone(), from, target, to));
            }
        }
        tables.push(TableDef { name: name.clone(), columns, primary_keys: pks.into_iter().map(|(_, c)| c).collect() });
    }

    // Resolve FK targets against the catalog; references to missing tables or
    // an implicit target (the parent's primary key) are resolved or dropped.
    let mut resolved = Vec::new();
    for (table, from, target, to) in foreign_keys {
        let Some(target_def) = tables.iter().find(|t| t.name.eq_ignore_ascii_case(&target)) else {
            continue;
        };
        let to_col = match to {
            Some(c) => target_def.column(&c).map(|c| c.name.clone()),
            None => target_def.primary_keys.first().cloned(),
        };
        let Some(to_col) = to_col else { continue };
        let Some(from_def) = tables.iter().find(|t| t.name == table) else { continue };
        let Some(from_col) = from_def.column(&from) else { continue };
        resolved.push(ForeignKey::new(
            ColumnRef::new(table.clone(), from_col.name.clone()),
            ColumnRef::new(target_def.name.clone(), to_col),
        ));
    }

    DatabaseSchema::new(db_id, tables, resolved)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Serialization style for schemas embedded in prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaFormat {
    #[default]
    Ddl,
    Listing,
}

fn quote_ident(name: &str) -> String {
    let plain = !name.is_empty()
        && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if plain {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}

struct RenderTable<'a> {
    def: &'a TableDef,
    columns: Vec<&'a ColumnDef>,
}

fn render_tables(tables: &[RenderTable<'_>], fks: &[ForeignKey], fk_as_comment: bool, format: SchemaFormat) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let outgoing: Vec<&ForeignKey> =
            fks.iter().filter(|fk| fk.from.table.eq_ignore_ascii_case(&t.def.name)).collect();
        match format {
            SchemaFormat::Ddl => {
                out.push_str(&format!("CREATE TABLE {} (\n", quote_ident(&t.def.name)));
                let mut lines: Vec<String> = t
                    .columns
                    .iter()
                    .map(|c| {
                        let mut line = format!("  {} {}", quote_ident(&c.name), c.ty);
                        if t.def.is_primary_key(&c.name) {
                            line.push_str(" PRIMARY KEY");
                        }
                        line
                    })
                    .collect();
                if !fk_as_comment {
                    for fk in &outgoing {
                        lines.push(format!(
                            "  FOREIGN KEY ({}) REFERENCES {}({})",
                            quote_ident(&fk.from.column),
                            quote_ident(&fk.to.table),
                            quote_ident(&fk.to.column)
                        ));
                    }
                }
                out.push_str(&lines.join(",\n"));
                out.push_str("\n);\n");
            }
            SchemaFormat::Listing => {
                let cols: Vec<String> = t
                    .columns
                    .iter()
                    .map(|c| {
                        let pk = if t.def.is_primary_key(&c.name) { ", primary key" } else { "" };
                        format!("{} ({}{pk})", c.name, c.ty)
                    })
                    .collect();
                out.push_str(&format!("Table {}: {}\n", t.def.name, cols.join(", ")));
                if !fk_as_comment {
                    for fk in &outgoing {
                        out.push_str(&format!("  foreign key: {} -> {}\n", fk.from, fk.to));
                    }
                }
            }
        }
    }
    if fk_as_comment && !fks.is_empty() {
        out.push('\n');
        for fk in fks {
            out.push_str(&format!("-- JOIN: {} = {}\n", fk.from, fk.to));
        }
    }
    out
}

impl DatabaseSchema {
    /// Deterministic prompt text for the whole catalog.
    pub fn render(&self, format: SchemaFormat) -> String {
        let tables: Vec<RenderTable<'_>> =
            self.tables.iter().map(|def| RenderTable { def, columns: def.columns.iter().collect() }).collect();
        render_tables(&tables, &self.foreign_keys, false, format)
    }
}

impl LinkedSchema {
    /// Deterministic prompt text for the crop. Tables and columns appear in
    /// parent order with parent casing; join edges become comments.
    /// Entities unknown to `parent` are skipped.
    pub fn render(&self, parent: &DatabaseSchema, format: SchemaFormat) -> String {
        let tables: Vec<RenderTable<'_>> = parent
            .tables
            .iter()
            .filter_map(|def| {
                let (_, kept) = self.kept.iter().find(|(t, _)| t.eq_ignore_ascii_case(&def.name))?;
                let columns: Vec<&ColumnDef> =
                    def.columns.iter().filter(|c| kept.iter().any(|k| k.eq_ignore_ascii_case(&c.name))).collect();
                Some(RenderTable { def, columns })
            })
            .collect();
        let edges: Vec<ForeignKey> = self
            .join_edges
            .iter()
            .filter_map(|e| {
                let (ft, fc) = parent.resolve(&e.from)?;
                let (tt, tc) = parent.resolve(&e.to)?;
                Some(ForeignKey::new(
                    ColumnRef::new(ft.name.clone(), fc.name.clone()),
                    ColumnRef::new(tt.name.clone(), tc.name.clone()),
                ))
            })
            .collect();
        render_tables(&tables, &edges, true, format)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singer_concert() -> DatabaseSchema {
        DatabaseSchema::new(
            "concert_singer",
            vec![
                TableDef {
                    name: "singer".into(),
                    columns: vec![
                        ColumnDef { name: "id".into(), ty: LogicalType::Number },
                        ColumnDef { name: "name".into(), ty: LogicalType::Text },
                        ColumnDef { name: "age".into(), ty: LogicalType::Number },
                    ],
                    primary_keys: vec!["id".into()],
                },
                TableDef {
                    name: "concert".into(),
                    columns: vec![
                        ColumnDef { name: "concert_id".into(), ty: LogicalType::Number },
                        ColumnDef { name: "singer_id".into(), ty: LogicalType::Number },
                        ColumnDef { name: "year".into(), ty: LogicalType::Text },
                    ],
                    primary_keys: vec!["concert_id".into()],
                },
            ],
            vec![ForeignKey::new(ColumnRef::new("concert", "singer_id"), ColumnRef::new("singer", "id"))],
        )
        .unwrap()
    }

    #[test]
    fn duplicate_table_names_rejected_case_insensitively() {
        let t = TableDef {
            name: "A".into(),
            columns: vec![ColumnDef { name: "x".into(), ty: LogicalType::Text }],
            primary_keys: vec![],
        };
        let mut t2 = t.clone();
        t2.name = "a".into();
        assert!(matches!(DatabaseSchema::new("d", vec![t, t2], vec![]), Err(SchemaError::Validation { .. })));
    }

    #[test]
    fn primary_key_must_exist() {
        let t = TableDef {
            name: "a".into(),
            columns: vec![ColumnDef { name: "x".into(), ty: LogicalType::Text }],
            primary_keys: vec!["y".into()],
        };
        assert!(DatabaseSchema::new("d", vec![t], vec![]).is_err());
    }

    #[test]
    fn unknown_column_in_link_is_single_violation() {
        let s = singer_concert();
        let link = LinkedSchema {
            db_id: s.db_id.clone(),
            kept: BTreeMap::from([("singer".to_string(), vec!["name".to_string(), "agee".to_string()])]),
            join_edges: vec![],
            notes: None,
        };
        let errs = validate_linked_schema(&s, &link, LinkPolicy::default()).unwrap_err();
        assert_eq!(errs, vec![LinkViolation { kind: ViolationKind::UnknownColumn, entity: "singer.agee".into() }]);
    }

    #[test]
    fn full_link_is_valid() {
        let s = singer_concert();
        let v = validate_linked_schema(&s, &s.full_link(), LinkPolicy::default()).unwrap();
        assert_eq!(v.link, s.full_link());
        assert!(v.warnings.is_empty());
    }

    #[test]
    fn undeclared_join_edge_is_warning_unless_strict() {
        let s = singer_concert();
        let mut link = s.full_link();
        link.join_edges = vec![ForeignKey::new(ColumnRef::new("concert", "year"), ColumnRef::new("singer", "age"))];
        let ok = validate_linked_schema(&s, &link, LinkPolicy::default()).unwrap();
        assert_eq!(ok.warnings.len(), 1);
        assert_eq!(ok.warnings[0].kind, ViolationKind::NonForeignKeyEdge);

        let strict = LinkPolicy { strict_join_edges: true };
        let errs = validate_linked_schema(&s, &link, strict).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, ViolationKind::NonForeignKeyEdge);
    }

    #[test]
    fn reversed_foreign_key_edge_accepted() {
        let s = singer_concert();
        let mut link = s.full_link();
        link.join_edges = vec![ForeignKey::new(ColumnRef::new("SINGER", "ID"), ColumnRef::new("concert", "singer_id"))];
        let ok = validate_linked_schema(&s, &link, LinkPolicy::default()).unwrap();
        assert!(ok.warnings.is_empty());
    }

    #[test]
    fn empty_link_rejected() {
        let s = singer_concert();
        let link = LinkedSchema { db_id: s.db_id.clone(), kept: BTreeMap::new(), join_edges: vec![], notes: None };
        let errs = validate_linked_schema(&s, &link, LinkPolicy::default()).unwrap_err();
        assert_eq!(errs[0].kind, ViolationKind::EmptyLink);
    }

    #[test]
    fn pruning_drops_unknowns() {
        let s = singer_concert();
        let link = LinkedSchema {
            db_id: s.db_id.clone(),
            kept: BTreeMap::from([
                ("singer".to_string(), vec!["name".to_string(), "agee".to_string()]),
                ("venue".to_string(), vec!["x".to_string()]),
            ]),
            join_edges: vec![ForeignKey::new(ColumnRef::new("concert", "singer_id"), ColumnRef::new("singer", "id"))],
            notes: None,
        };
        let p = link.pruned(&s).unwrap();
        assert_eq!(p.kept, BTreeMap::from([("singer".to_string(), vec!["name".to_string()])]));
        assert!(p.join_edges.is_empty());
    }

    #[test]
    fn one_table_ddl() {
        let s = DatabaseSchema::new(
            "d",
            vec![TableDef {
                name: "t".into(),
                columns: vec![
                    ColumnDef { name: "a".into(), ty: LogicalType::Number },
                    ColumnDef { name: "b".into(), ty: LogicalType::Text },
                ],
                primary_keys: vec!["a".into()],
            }],
            vec![],
        )
        .unwrap();
        assert_eq!(s.render(SchemaFormat::Ddl), "CREATE TABLE t (\n  a number PRIMARY KEY,\n  b text\n);\n");
    }

    #[test]
    fn full_schema_renders_foreign_keys_inline() {
        let text = singer_concert().render(SchemaFormat::Ddl);
        assert!(text.contains("FOREIGN KEY (singer_id) REFERENCES singer(id)"));
        assert_eq!(text.matches("CREATE TABLE").count(), 2);
    }

    #[test]
    fn linked_render_uses_parent_casing_and_edge_comments() {
        let s = singer_concert();
        let link = LinkedSchema {
            db_id: s.db_id.clone(),
            kept: BTreeMap::from([
                ("SINGER".to_string(), vec!["NAME".to_string(), "id".to_string()]),
                ("concert".to_string(), vec!["singer_id".to_string()]),
            ]),
            join_edges: vec![ForeignKey::new(ColumnRef::new("Concert", "Singer_ID"), ColumnRef::new("singer", "id"))],
            notes: None,
        };
        let text = link.render(&s, SchemaFormat::Ddl);
        assert_eq!(
            text,
            "CREATE TABLE singer (\n  id number PRIMARY KEY,\n  name text\n);\n\n\
             CREATE TABLE concert (\n  singer_id number\n);\n\n\
             -- JOIN: concert.singer_id = singer.id\n"
        );
    }

    #[test]
    fn odd_identifiers_are_quoted() {
        assert_eq!(quote_ident("Home Town"), "\"Home Town\"");
        assert_eq!(quote_ident("a\"b"), "\"a\"\"b\"");
        assert_eq!(quote_ident("_ok1"), "_ok1");
    }

    #[test]
    fn listing_format() {
        let text = singer_concert().render(SchemaFormat::Listing);
        assert!(text.starts_with("Table singer: id (number, primary key), name (text), age (number)\n"));
        assert!(text.contains("  foreign key: concert.singer_id -> singer.id\n"));
    }

    #[test]
    fn declared_type_mapping() {
        assert_eq!(LogicalType::from_declared("INTEGER"), LogicalType::Number);
        assert_eq!(LogicalType::from_declared("varchar(20)"), LogicalType::Text);
        assert_eq!(LogicalType::from_declared("DATETIME"), LogicalType::Time);
        assert_eq!(LogicalType::from_declared("bool"), LogicalType::Boolean);
        assert_eq!(LogicalType::from_declared(""), LogicalType::Others);
    }
}
