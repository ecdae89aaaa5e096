//! Catalog of coded SQL failure modes used to prime the correction-plan
//! agent, plus extraction of codes from free-form correction plans.
//!
//! Codes are stable `CAT-NN` identifiers. Titles and hints may be reworded
//! without breaking parsing.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Category {
    pub id: &'static str,
    pub name: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ErrorCode {
    pub code: &'static str,
    pub category: &'static str,
    pub title: &'static str,
    pub hint: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    pub categories: Vec<Category>,
    pub codes: Vec<ErrorCode>,
}

const CATEGORIES: [Category; 9] = [
    Category { id: "SYN", name: "Syntax errors" },
    Category { id: "SCH", name: "Schema linking errors" },
    Category { id: "JOIN", name: "Join errors" },
    Category { id: "FLT", name: "Filter condition errors" },
    Category { id: "AGG", name: "Aggregation errors" },
    Category { id: "VAL", name: "Value representation errors" },
    Category { id: "SUB", name: "Subquery errors" },
    Category { id: "SET", name: "Set operation errors" },
    Category { id: "STR", name: "Structural omissions" },
];

macro_rules! code {
    ($code:literal, $cat:literal, $title:literal, $hint:literal) => {
        ErrorCode { code: $code, category: $cat, title: $title, hint: $hint }
    };
}

// Subtypes added to round out their categories:
// SYN-03, SCH-04, JOIN-04, FLT-03, FLT-04, AGG-03, AGG-04, VAL-03, SUB-03, STR-03.
const CODES: [ErrorCode; 31] = [
    code!("SYN-01", "SYN", "Invalid alias", "Define every alias once and reference it only in its scope."),
    code!("SYN-02", "SYN", "Malformed SQL", "Fix keyword order, commas, parentheses and quoting."),
    code!("SYN-03", "SYN", "Unsupported function or keyword", "Use only functions and syntax that SQLite supports."),
    code!("SCH-01", "SCH", "Missing column", "Use a column that exists in the linked schema; check spelling."),
    code!("SCH-02", "SCH", "Ambiguous column", "Qualify the column with its table name or alias."),
    code!("SCH-03", "SCH", "Incorrect foreign key", "Join on the declared key pair, not a look-alike column."),
    code!("SCH-04", "SCH", "Column from wrong table", "Take the column from the table that actually stores it."),
    code!("JOIN-01", "JOIN", "Missing join", "Add the join that brings in the table the question needs."),
    code!(
        "JOIN-02",
        "JOIN",
        "Wrong join type",
        "Switch INNER/LEFT join so unmatched rows are kept or dropped as asked."
    ),
    code!("JOIN-03", "JOIN", "Extra table", "Remove tables that contribute no needed column or filter."),
    code!("JOIN-04", "JOIN", "Wrong join condition", "Match the ON clause to the key relationship between the tables."),
    code!("FLT-01", "FLT", "Incorrect column in WHERE clause", "Filter on the column the question refers to."),
    code!("FLT-02", "FLT", "Type mismatch", "Compare values of the column's type; quote text, not numbers."),
    code!("FLT-03", "FLT", "Wrong comparison operator", "Check >, >=, <, <=, =, != and LIKE against the wording."),
    code!("FLT-04", "FLT", "Missing or extra filter", "Add every condition the question states and nothing more."),
    code!("AGG-01", "AGG", "Missing GROUP BY", "Group by the non-aggregated selected columns."),
    code!("AGG-02", "AGG", "HAVING misuse", "Put aggregate conditions in HAVING and row conditions in WHERE."),
    code!("AGG-03", "AGG", "Wrong aggregate function", "Pick COUNT, SUM, AVG, MIN or MAX as the question asks."),
    code!("AGG-04", "AGG", "Missing DISTINCT", "Add DISTINCT when the question asks for unique values or counts."),
    code!("VAL-01", "VAL", "Hard-coded value", "Derive values from the data instead of guessing literals."),
    code!("VAL-02", "VAL", "Format mismatch", "Match the stored format of dates, casing and units."),
    code!("VAL-03", "VAL", "Misspelled literal", "Copy literal values exactly as written in the question or data."),
    code!("SUB-01", "SUB", "Unused subquery", "Remove the subquery or connect its result to the outer query."),
    code!("SUB-02", "SUB", "Incorrectly correlated subquery", "Reference the outer row correctly or decorrelate."),
    code!(
        "SUB-03",
        "SUB",
        "Subquery returns wrong shape",
        "Return one column for IN and one row for scalar comparison."
    ),
    code!("SET-01", "SET", "UNION misuse", "Use UNION only to combine alternatives; keep column lists aligned."),
    code!("SET-02", "SET", "INTERSECT misuse", "Use INTERSECT for rows satisfying both conditions on the same key."),
    code!("SET-03", "SET", "EXCEPT misuse", "Use EXCEPT to remove rows; check operand order."),
    code!("STR-01", "STR", "Missing ORDER BY", "Add ORDER BY for superlatives, rankings and sorted output."),
    code!("STR-02", "STR", "Missing LIMIT", "Add LIMIT when the question asks for the top or first N."),
    code!("STR-03", "STR", "Wrong SELECT columns", "Select exactly the columns asked for, in the asked order."),
];

/// The built-in catalog: 9 categories, 31 codes.
pub fn default_taxonomy() -> Taxonomy {
    Taxonomy { categories: CATEGORIES.to_vec(), codes: CODES.to_vec() }
}

fn code_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-Z]{2,5}-[0-9]{2}\b").expect("valid code regex"))
}

/// Codes found in a piece of text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParsedCodes {
    pub known: Vec<ErrorCode>,
    pub unknown: Vec<String>,
}

impl Taxonomy {
    pub fn get(&self, code: &str) -> Option<&ErrorCode> {
        self.codes.iter().find(|c| c.code == code)
    }

    pub fn codes_in<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a ErrorCode> + 'a {
        self.codes.iter().filter(move |c| c.category == category)
    }

    /// Checks the catalog's structural invariants. Returns a description of
    /// the first problem found.
    pub fn check(&self) -> Result<(), String> {
        if self.categories.len() != 9 {
            return Err(format!("expected 9 categories, found {}", self.categories.len()));
        }
        if self.codes.len() != 31 {
            return Err(format!("expected 31 codes, found {}", self.codes.len()));
        }
        let mut seen = HashSet::new();
        for c in &self.codes {
            if !seen.insert(c.code) {
                return Err(format!("duplicate code {}", c.code));
            }
            if !self.categories.iter().any(|k| k.id == c.category) {
                return Err(format!("code {} has unknown category {}", c.code, c.category));
            }
            if code_pattern().find(c.code).map(|m| m.as_str()) != Some(c.code) {
                return Err(format!("code {} does not match the code pattern", c.code));
            }
            if c.title.split_whitespace().count() > 8 {
                return Err(format!("title of {} exceeds 8 words", c.code));
            }
        }
        for k in &self.categories {
            if self.codes_in(k.id).next().is_none() {
                return Err(format!("category {} has no codes", k.id));
            }
        }
        Ok(())
    }

    /// Compact prompt listing: a header per category, then `CODE — title`
    /// lines.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        for k in &self.categories {
            let _ = writeln!(out, "[{}] {}", k.id, k.name);
            for c in self.codes_in(k.id) {
                let _ = writeln!(out, "{} — {}", c.code, c.title);
            }
        }
        out
    }

    /// One tab-separated record per code: code, category, title, hint.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.codes {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", c.code, c.category, c.title, c.hint);
        }
        out
    }

    /// Extracts every code-shaped token, deduplicated in first-appearance
    /// order. Tokens not in the catalog are reported in `unknown`.
    pub fn parse_codes(&self, text: &str) -> ParsedCodes {
        let mut seen = HashSet::new();
        let mut out = ParsedCodes::default();
        for m in code_pattern().find_iter(text) {
            let token = m.as_str();
            if !seen.insert(token) {
                continue;
            }
            match self.get(token) {
                Some(c) => out.known.push(c.clone()),
                None => out.unknown.push(token.to_string()),
            }
        }
        out
    }
}
