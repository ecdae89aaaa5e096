mod support;

use std::collections::BTreeMap;

use nl2sql::schema::{
    introspect_database, load_tables_json, parse_tables_json, validate_linked_schema, ColumnDef, ColumnRef,
    DatabaseSchema, ForeignKey, LinkPolicy, LinkedSchema, LogicalType, SchemaError, SchemaFormat, TableDef,
    ViolationKind,
};
use proptest::prelude::*;
use support::*;

fn col(name: &str, ty: LogicalType) -> ColumnDef {
    ColumnDef { name: name.into(), ty }
}

fn fk(a: &str, b: &str) -> ForeignKey {
    ForeignKey::new(ColumnRef::parse(a).unwrap(), ColumnRef::parse(b).unwrap())
}

#[test]
fn concert_singer_tables_file() {
    let schemas = load_tables_json(fixture_path("concert_singer_tables.json")).unwrap();
    assert_eq!(schemas.len(), 1);
    let s = &schemas[0];
    assert_eq!(s.db_id, "concert_singer");
    let names: Vec<&str> = s.tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["singer", "concert"]);
    let singer = s.table("singer").unwrap();
    assert_eq!(singer.columns.len(), 5);
    assert_eq!(singer.primary_keys, ["singer_id"]);
    assert_eq!(singer.column("is_male").unwrap().ty, LogicalType::Others);
    assert_eq!(s.foreign_keys, vec![fk("concert.singer_id", "singer.singer_id")]);
}

#[test]
fn out_of_range_foreign_key_names_the_database() {
    let text = CONCERT_TABLES.replace("[[9, 1]]", "[[9, 42]]");
    match parse_tables_json(&text) {
        Err(SchemaError::Validation { db_id, message }) => {
            assert_eq!(db_id, "concert_singer");
            assert!(message.contains("42"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn composite_primary_keys_accepted() {
    let text = CONCERT_TABLES.replace("\"primary_keys\": [1, 6]", "\"primary_keys\": [[6, 9], 1]");
    let s = parse_tables_json(&text).unwrap().remove(0);
    assert_eq!(s.table("concert").unwrap().primary_keys, ["concert_id", "singer_id"]);
}

#[test]
fn introspection_matches_the_ddl() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("concert_singer.sqlite");
    build_db(&db, CONCERT_SQL);
    let expected = DatabaseSchema::new(
        "concert_singer",
        vec![
            TableDef {
                name: "singer".into(),
                columns: vec![
                    col("singer_id", LogicalType::Number),
                    col("name", LogicalType::Text),
                    col("country", LogicalType::Text),
                    col("age", LogicalType::Number),
                    col("is_male", LogicalType::Text),
                ],
                primary_keys: vec!["singer_id".into()],
            },
            TableDef {
                name: "concert".into(),
                columns: vec![
                    col("concert_id", LogicalType::Number),
                    col("concert_name", LogicalType::Text),
                    col("year", LogicalType::Text),
                    col("singer_id", LogicalType::Number),
                ],
                primary_keys: vec!["concert_id".into()],
            },
        ],
        vec![fk("concert.singer_id", "singer.singer_id")],
    )
    .unwrap();
    assert_eq!(introspect_database(&db).unwrap(), expected);
}

#[test]
fn introspection_of_wider_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("shop.sqlite");
    build_db(&db, SHOP_SQL);
    let before = file_digest(&db);
    let s = introspect_database(&db).unwrap();
    assert_eq!(file_digest(&db), before);
    assert_eq!(s.tables.len(), 9);
    assert_eq!(s.table("order_items").unwrap().primary_keys, ["order_id", "product_id"]);
    assert_eq!(s.table("products").unwrap().column("price").unwrap().ty, LogicalType::Number);
    assert_eq!(s.table("attachments").unwrap().column("data").unwrap().ty, LogicalType::Others);
    assert!(s.has_foreign_key(&fk("employees.manager_id", "employees.id")));
    assert!(s.has_foreign_key(&fk("customers.id", "orders.customer_id")));
    assert_eq!(s.foreign_keys.len(), 9);
}

#[test]
fn ddl_rendering_is_stable() {
    let s = parse_tables_json(CONCERT_TABLES).unwrap().remove(0);
    let ddl = s.render(SchemaFormat::Ddl);
    assert_eq!(
        ddl,
        "CREATE TABLE singer (\n  singer_id number PRIMARY KEY,\n  name text,\n  country text,\n  age number,\n  is_male others\n);\n\n\
         CREATE TABLE concert (\n  concert_id number PRIMARY KEY,\n  concert_name text,\n  year text,\n  singer_id number,\n  FOREIGN KEY (singer_id) REFERENCES singer(singer_id)\n);\n"
    );
}

#[test]
fn crop_with_unknowns_reports_each() {
    let s = parse_tables_json(CONCERT_TABLES).unwrap().remove(0);
    let link = LinkedSchema {
        db_id: s.db_id.clone(),
        kept: BTreeMap::from([
            ("singer".to_string(), vec!["name".to_string(), "salary".to_string()]),
            ("venue".to_string(), vec![]),
        ]),
        join_edges: vec![],
        notes: None,
    };
    let errs = validate_linked_schema(&s, &link, LinkPolicy::default()).unwrap_err();
    let kinds: Vec<ViolationKind> = errs.iter().map(|e| e.kind).collect();
    assert!(kinds.contains(&ViolationKind::UnknownColumn));
    assert!(kinds.contains(&ViolationKind::UnknownTable));
    assert_eq!(errs.len(), 2);
}

/// A schema with random tables and columns plus a chain of foreign keys.
fn arb_schema() -> impl Strategy<Value = DatabaseSchema> {
    prop::collection::vec(1usize..5, 1..6).prop_map(|widths| {
        let tables: Vec<TableDef> = widths
            .iter()
            .enumerate()
            .map(|(i, w)| TableDef {
                name: format!("T{i}_x"),
                columns: (0..*w).map(|j| col(&format!("Col{j}"), LogicalType::Number)).collect(),
                primary_keys: vec!["Col0".into()],
            })
            .collect();
        let fks = (1..tables.len()).map(|i| fk(&format!("T{i}_x.Col0"), &format!("T{}_x.Col0", i - 1))).collect();
        DatabaseSchema::new("db", tables, fks).unwrap()
    })
}

proptest! {
    #[test]
    fn random_crops_validate(s in arb_schema(), picks in prop::collection::vec(any::<(bool, u8)>(), 1..12)) {
        let mut kept: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, t) in s.tables.iter().enumerate() {
            let (take, mask) = picks[i % picks.len()];
            if take || i == 0 {
                let cols = t.columns.iter().enumerate()
                    .filter(|(j, _)| mask & (1 << j) != 0)
                    .map(|(_, c)| c.name.to_ascii_lowercase())
                    .collect();
                kept.insert(t.name.to_ascii_uppercase(), cols);
            }
        }
        let has = |r: &ColumnRef| kept.iter().any(|(t, cols)| {
            t.eq_ignore_ascii_case(&r.table) && cols.iter().any(|c| c.eq_ignore_ascii_case(&r.column))
        });
        let join_edges = s.foreign_keys.iter().filter(|e| has(&e.from) && has(&e.to)).cloned().collect();
        let link = LinkedSchema { db_id: s.db_id.clone(), kept, join_edges, notes: None };
        let v = validate_linked_schema(&s, &link, LinkPolicy { strict_join_edges: true });
        prop_assert!(v.is_ok(), "{:?}", v);
    }

    #[test]
    fn rendered_crop_uses_parent_names(s in arb_schema()) {
        let mut link = s.full_link();
        link.kept = link.kept.into_iter().map(|(t, cols)| {
            (t.to_ascii_lowercase(), cols.into_iter().map(|c| c.to_ascii_uppercase()).collect())
        }).collect();
        for fmt in [SchemaFormat::Ddl, SchemaFormat::Listing] {
            let text = link.render(&s, fmt);
            for t in &s.tables {
                prop_assert!(text.contains(&t.name));
                for c in &t.columns {
                    prop_assert!(text.contains(&c.name));
                }
            }
            prop_assert!(!text.contains("t0_x"));
            prop_assert!(!text.contains("COL0"));
        }
    }

    #[test]
    fn full_link_always_validates(s in arb_schema()) {
        let strict = LinkPolicy { strict_join_edges: true };
        let v = validate_linked_schema(&s, &s.full_link(), strict);
        prop_assert!(v.is_ok());
    }
}
