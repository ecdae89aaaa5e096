//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use nl2sql::gateway::{AgentRole, ChatRequest, Gateway, MessageRole, ScriptedBackend};
use nl2sql::pipeline::{Pipeline, PipelineConfig};
use nl2sql::taxonomy::default_taxonomy;
use nl2sql::TemplateSet;

pub const SHOP_SQL: &str = include_str!("../fixtures/shop.sql");
pub const CONCERT_SQL: &str = include_str!("../fixtures/concert_singer.sql");
pub const CONCERT_TABLES: &str = include_str!("../fixtures/concert_singer_tables.json");
pub const CONCERT_QUESTIONS: &str = include_str!("../fixtures/concert_questions.json");
pub const COMPARATOR_PAIRS: &str = include_str!("../fixtures/comparator_pairs.tsv");

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Creates a SQLite file from a script.
pub fn build_db(path: &Path, script: &str) {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).unwrap();
    }
    let conn = rusqlite::Connection::open(path).unwrap();
    conn.execute_batch(script).unwrap();
}

/// A benchmark-shaped directory: `database/<db>/<db>.sqlite`, `tables.json`,
/// and `questions.json`.
pub struct Bench {
    pub dir: tempfile::TempDir,
}

impl Bench {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        build_db(&dir.path().join("database/concert_singer/concert_singer.sqlite"), CONCERT_SQL);
        build_db(&dir.path().join("database/shop/shop.sqlite"), SHOP_SQL);
        fs::write(dir.path().join("tables.json"), CONCERT_TABLES).unwrap();
        fs::write(dir.path().join("questions.json"), CONCERT_QUESTIONS).unwrap();
        Self { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn db_root(&self) -> PathBuf {
        self.root().join("database")
    }

    pub fn tables(&self) -> PathBuf {
        self.root().join("tables.json")
    }

    pub fn questions(&self) -> PathBuf {
        self.root().join("questions.json")
    }

    pub fn db_file(&self, db_id: &str) -> PathBuf {
        self.db_root().join(db_id).join(format!("{db_id}.sqlite"))
    }
}

pub fn file_digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// Digest of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), file_digest(&p)));
            }
        }
    }
    out.sort();
    out
}

pub fn fenced(sql: &str) -> String {
    format!("Here is the query.\n```sql\n{sql}\n```")
}

pub const CONCERT_LINK: &str = r#"{"tables": {"singer": ["singer_id", "name", "country", "age"], "concert": ["concert_id", "year", "singer_id"]}, "join_edges": [["concert.singer_id", "singer.singer_id"]]}"#;
pub const SUBPROBLEMS: &str = r#"{"SELECT": "the requested value", "FROM": "singer"}"#;
pub const PLAN: &str =
    r#"{"reasoning": "direct lookup", "steps": ["Read the singer table.", "Return the requested value."]}"#;
pub const CORRECTION_PLAN: &str =
    r#"{"error_codes": ["FLT-04"], "reasoning": "the filter is wrong", "repair_steps": ["Fix the WHERE clause."]}"#;

/// Answers for the fixture questions: first reply, then the reply after
/// correction. `None` for the second means the model never fixes it.
pub fn concert_answers() -> HashMap<&'static str, (&'static str, Option<&'static str>)> {
    HashMap::from([
        ("How many singers do we have?", ("SELECT count(*) FROM singer", None)),
        (
            "What is the average age of singers from France?",
            ("SELECT avg(age) FROM singer WHERE country = 'France'", None),
        ),
        (
            "List the names of singers older than 40.",
            ("SELECT name FROM singer WHERE age > 50", Some("SELECT name FROM singer WHERE age > 40")),
        ),
        (
            "How many concerts were held in 2014?",
            (
                "SELECT count(*) FROM concert WHERE year = '2015'",
                Some("SELECT count(*) FROM concert WHERE year = '2014'"),
            ),
        ),
        ("Show all distinct countries of singers.", ("SELECT DISTINCT country FROM singer", None)),
        (
            "List singer names ordered by age descending.",
            ("SELECT name FROM singer ORDER BY age", Some("SELECT name FROM singer ORDER BY age DESC")),
        ),
        ("What is the name of the youngest singer?", ("SELECT name FROM singer ORDER BY age ASC LIMIT 1", None)),
        (
            "How many concerts did each singer perform?",
            ("SELECT s.name, count(*) FROM singer s JOIN concert c ON c.singer_id = s.singer_id GROUP BY s.name", None),
        ),
        ("Which singers never performed a concert?", ("SELECT name FROM singer", Some("SELECT nme FROM singer"))),
        ("What is the maximum singer age?", ("SELECT max(age) FROM singers", Some("SELECT max(age) FROM singer"))),
    ])
}

fn last_user(req: &ChatRequest) -> &str {
    req.messages.iter().rev().find(|m| m.role == MessageRole::User).map(|m| m.content.as_str()).unwrap_or("")
}

/// A scripted model that answers by question text, so replies do not
/// depend on call order and parallel runs stay deterministic.
pub fn concert_model() -> ScriptedBackend {
    let answers = concert_answers();
    ScriptedBackend::new().with_responder(move |role, req| {
        let prompt = last_user(req);
        let (first, fixed) = answers.iter().find(|(q, _)| prompt.contains(*q)).map(|(_, a)| *a)?;
        Some(match role {
            AgentRole::SchemaLinking => CONCERT_LINK.to_string(),
            AgentRole::Subproblem => SUBPROBLEMS.to_string(),
            AgentRole::QueryPlan => PLAN.to_string(),
            AgentRole::Sql => fenced(first),
            AgentRole::CorrectionPlan => CORRECTION_PLAN.to_string(),
            AgentRole::CorrectionSql => fenced(fixed.unwrap_or(first)),
        })
    })
}

pub fn pipeline_with(backend: ScriptedBackend, config: PipelineConfig) -> Pipeline {
    let gateway = Gateway::single(Arc::new(backend), "scripted-model");
    Pipeline::new(Arc::new(gateway), Arc::new(TemplateSet::default()), Arc::new(default_taxonomy()), config)
}
