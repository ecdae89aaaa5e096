mod support;

use nl2sql::exec::{sanitize, sanitize_detailed, SanitizeError};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    name: String,
    raw: String,
    sql: Option<String>,
    error: Option<String>,
}

fn corpus() -> Vec<Case> {
    serde_json::from_str(include_str!("fixtures/sanitizer_corpus.json")).unwrap()
}

#[test]
fn corpus_matches_exactly() {
    let cases = corpus();
    assert!(cases.len() >= 20);
    for c in cases {
        let got = sanitize(&c.raw);
        match (&c.sql, c.error.as_deref()) {
            (Some(want), _) => assert_eq!(got.as_ref().map(|q| q.text()), Ok(want.as_str()), "case `{}`", c.name),
            (None, Some("empty")) => assert_eq!(got, Err(SanitizeError::Empty), "case `{}`", c.name),
            (None, Some("no_sql")) => assert_eq!(got, Err(SanitizeError::NoSql), "case `{}`", c.name),
            _ => panic!("bad fixture `{}`", c.name),
        }
    }
}

#[test]
fn corpus_outputs_are_fixed_points() {
    for c in corpus() {
        if let Ok(q) = sanitize(&c.raw) {
            assert_eq!(sanitize(q.text()).unwrap(), q, "case `{}`", c.name);
        }
    }
}

#[test]
fn dropped_statements_are_reported() {
    let s = sanitize_detailed("SELECT 1; DELETE FROM singer; ").unwrap();
    assert_eq!(s.query.text(), "SELECT 1");
    assert_eq!(s.dropped_statements, vec!["DELETE FROM singer".to_string()]);
}

fn sql_like() -> impl Strategy<Value = String> {
    let cols = prop::sample::select(vec!["name", "age", "count(*)", "max(age)", "country"]);
    let tables = prop::sample::select(vec!["singer", "concert", "t"]);
    let filt = prop::option::of(prop::sample::select(vec![
        " WHERE age > 3",
        " WHERE name = 'x;y'",
        " WHERE country = \"France\"",
    ]));
    (cols, tables, filt).prop_map(|(c, t, f)| format!("SELECT {c} FROM {t}{}", f.unwrap_or("")))
}

fn wrapping() -> impl Strategy<Value = (String, String)> {
    (
        prop::sample::select(vec!["", "Here you go:\n", "```sql\n", "```\n", "Answer: "]),
        prop::sample::select(vec!["", ";", ";\n", "\n```", ";\n```\nHope this helps."]),
    )
        .prop_map(|(a, b)| (a.to_string(), b.to_string()))
}

proptest! {
    #[test]
    fn sanitize_is_idempotent(raw in ".{0,80}") {
        if let Ok(q) = sanitize(&raw) {
            prop_assert_eq!(sanitize(q.text()).unwrap(), q);
        }
    }

    #[test]
    fn wrapped_statement_is_recovered(sql in sql_like(), (pre, post) in wrapping()) {
        let raw = format!("{pre}{sql}{post}");
        let q = sanitize(&raw).unwrap();
        prop_assert_eq!(q.text(), sql.as_str());
        prop_assert_eq!(sanitize(q.text()).unwrap(), q);
    }
}
