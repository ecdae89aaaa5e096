use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const CONCERT_SQL: &str = include_str!("../../core/tests/fixtures/concert_singer.sql");
const CONCERT_TABLES: &str = include_str!("../../core/tests/fixtures/concert_singer_tables.json");
const CONCERT_QUESTIONS: &str = include_str!("../../core/tests/fixtures/concert_questions.json");

const LINK: &str = r#"{"tables": {"singer": ["singer_id", "name", "age"]}, "join_edges": []}"#;
const SUBPROBLEMS: &str = r#"{"SELECT": "names", "FROM": "singer"}"#;
const PLAN: &str = r#"{"reasoning": "lookup", "steps": ["Read singer."]}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    /// Database tree plus a config with a scripted backend whose SQL agent
    /// answers `sql`.
    fn new(sql: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("database/concert_singer/concert_singer.sqlite");
        fs::create_dir_all(db.parent().unwrap()).unwrap();
        rusqlite::Connection::open(&db).unwrap().execute_batch(CONCERT_SQL).unwrap();
        fs::write(dir.path().join("tables.json"), CONCERT_TABLES).unwrap();
        fs::write(dir.path().join("questions.json"), CONCERT_QUESTIONS).unwrap();
        let fixture = serde_json::json!({
            "lenient": true,
            "roles": {
                "schema_linking": [LINK],
                "subproblem": [SUBPROBLEMS],
                "query_plan": [PLAN],
                "sql": [format!("```sql\n{sql}\n```")],
            }
        });
        fs::write(dir.path().join("script.json"), fixture.to_string()).unwrap();
        fs::write(
            dir.path().join("nl2sql.toml"),
            "db_root = \"database\"\ntables = \"tables.json\"\n\n[backends.local]\nkind = \"scripted\"\nfixture = \"script.json\"\n",
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("nl2sql.toml");
        Command::new(env!("CARGO_BIN_EXE_nl2sql"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn ask_prints_sql_and_verdict() {
    let env = Env::new("SELECT name FROM singer WHERE age > 40");
    let out = env.run(&[
        "ask",
        "--db",
        "concert_singer",
        "--question",
        "List the names of singers older than 40.",
        "--gold",
        "SELECT name FROM singer WHERE age > 40",
    ]);
    let text = stdout(&out);
    assert_eq!(code(&out), 0, "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.starts_with("SELECT name FROM singer WHERE age > 40\n"), "{text}");
    assert!(text.contains("attempts: 1"));
    assert!(text.contains("ea: true"));
}

#[test]
fn ask_without_tables_introspects() {
    let env = Env::new("SELECT count(*) FROM singer");
    fs::write(
        env.path("nl2sql.toml"),
        "db_root = \"database\"\n[backends.local]\nkind = \"scripted\"\nfixture = \"script.json\"\n",
    )
    .unwrap();
    let out = env.run(&["ask", "--db", "concert_singer", "--question", "How many singers?"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!stdout(&out).contains("ea:"));
}

#[test]
fn no_correction_flag_reaches_the_pipeline() {
    // The script has no correction replies, so a run that enters the loop
    // fails at the correction stage.
    let env = Env::new("SELECT name FROM singer WHERE age > 50");
    let gold = "SELECT name FROM singer WHERE age > 40";
    let base = ["ask", "--db", "concert_singer", "--question", "Older than 40?", "--gold", gold];
    let with_loop = env.run(&base);
    assert_eq!(code(&with_loop), 3, "{}", stdout(&with_loop));
    let trace = env.path("trace.jsonl");
    let mut args = base.to_vec();
    args.extend(["--no-correction", "--trace", trace.to_str().unwrap()]);
    let out = env.run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("attempts: 1"));
    assert!(stdout(&out).contains("ea: false"));
    let shown = env.run(&["trace", "--file", trace.to_str().unwrap()]);
    assert!(!stdout(&shown).contains("correction"), "{}", stdout(&shown));
}

#[test]
fn eval_writes_report_files() {
    let env = Env::new("SELECT count(*) FROM singer");
    let out = env.run(&[
        "eval",
        "--questions",
        "questions.json",
        "--limit",
        "2",
        "--parallelism",
        "1",
        "--no-correction",
        "--out",
        "out",
    ]);
    let text = stdout(&out);
    assert_eq!(code(&out), 0, "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("execution accuracy: 50.00% (1/2)"), "{text}");
    for f in ["report.json", "samples.csv", "summary.txt"] {
        assert!(env.path("out").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn unknown_database_is_a_data_error() {
    let env = Env::new("SELECT 1");
    let out = env.run(&["ask", "--db", "nope", "--question", "q"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn usage_errors_exit_one() {
    let env = Env::new("SELECT 1");
    assert_eq!(code(&env.run(&["ask", "--db", "concert_singer"])), 1);
    assert_eq!(code(&env.run(&["frobnicate"])), 1);
    assert_eq!(code(&env.run(&["cache", "stats"])), 1);
    assert_eq!(code(&env.run(&["--help"])), 0);
}

#[test]
fn taxonomy_list_is_tsv() {
    let env = Env::new("SELECT 1");
    let out = env.run(&["taxonomy", "list"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines.iter().all(|l| l.split('\t').count() == 4));
}

#[test]
fn cache_stats_and_clear() {
    let env = Env::new("SELECT count(*) FROM singer");
    let cache = env.path("cache");
    let cache = cache.to_str().unwrap();
    let out = env.run(&["ask", "--db", "concert_singer", "--question", "How many?", "--cache-dir", cache]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stats = stdout(&env.run(&["cache", "stats", "--dir", cache]));
    assert!(stats.starts_with("entries: 4\n"), "{stats}");
    assert!(stdout(&env.run(&["cache", "clear", "--dir", cache])).starts_with("removed 4"));
    assert!(stdout(&env.run(&["cache", "stats", "--dir", cache])).starts_with("entries: 0\n"));
}
