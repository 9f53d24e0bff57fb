//! The schema document and the loader must agree: structural defects are
//! rejected by both, relational ones only by the loader, and each of those
//! is listed under the schema's `x-invariants`.

use std::path::PathBuf;

use hopqg::corpus::{load_and_validate, parse_record, read_header};
use hopqg::synthetic::{synthetic_corpus, SyntheticConfig};
use serde_json::{json, Value};

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn schema() -> Value {
    let text = std::fs::read_to_string(repo_path("schema/annotated_example.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn validator() -> jsonschema::Validator {
    jsonschema::validator_for(&schema()).expect("schema compiles")
}

fn base_span() -> Value {
    json!({
        "id": "s",
        "documents": [
            {"title": "A", "sentences": [["x", "y", "z"], ["w"]]},
            {"title": "B", "sentences": [["u", "v"]]}
        ],
        "answer": {"kind": "span", "doc": 1, "sentence": 0, "start": 0, "end": 2},
        "question": ["q", "?"],
        "supporting_facts": [[0, 1], [1, 0]],
        "qtype": "bridge",
        "level": "hard",
        "entities": [{"doc": 0, "sentence": 0, "start": 0, "end": 1, "label": "X", "norm": "x"}],
        "coref": [{"doc": 0, "clusters": [[{"sentence": 0, "start": 1, "end": 3}]]}]
    })
}

fn loader_accepts(v: &Value) -> bool {
    parse_record(&v.to_string()).is_ok()
}

fn edit(f: impl FnOnce(&mut Value)) -> Value {
    let mut v = base_span();
    f(&mut v);
    v
}

#[test]
fn base_record_passes_both() {
    let v = base_span();
    assert!(validator().is_valid(&v));
    assert!(loader_accepts(&v));
}

#[test]
fn synthetic_records_pass_both() {
    let val = validator();
    for ex in synthetic_corpus(&SyntheticConfig { examples: 48, long_fraction: 0.3, ..Default::default() }) {
        let v = serde_json::to_value(&ex).unwrap();
        assert!(val.is_valid(&v), "{}", ex.id);
        assert!(loader_accepts(&v), "{}", ex.id);
    }
}

#[test]
fn example_file_passes_both() {
    let path = repo_path("schema/example.jsonl");
    let val = validator();
    for line in std::fs::read_to_string(&path).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(val.is_valid(&v), "{line}");
    }
    assert_eq!(load_and_validate(&path).unwrap().len(), 2);
    let header = read_header(&path).unwrap().expect("header line");
    assert_eq!(header.format, "hopqg-annotated/1");
    assert_eq!(header.annotators.len(), 2);
}

#[test]
fn structural_defects_fail_both() {
    let cases: Vec<(&str, Value)> = vec![
        ("missing id", edit(|v| drop(v.as_object_mut().unwrap().remove("id")))),
        ("unknown field", edit(|v| v["extra"] = json!(1))),
        ("three documents", edit(|v| {
            let d = v["documents"][0].clone();
            v["documents"].as_array_mut().unwrap().push(d);
        })),
        ("one document", edit(|v| drop(v["documents"].as_array_mut().unwrap().pop()))),
        ("no sentences", edit(|v| v["documents"][0]["sentences"] = json!([]))),
        ("empty sentence", edit(|v| v["documents"][0]["sentences"][1] = json!([]))),
        ("empty question", edit(|v| v["question"] = json!([]))),
        ("negative index", edit(|v| v["answer"]["start"] = json!(-1))),
        ("fractional index", edit(|v| v["answer"]["end"] = json!(1.5))),
        ("unknown answer kind", edit(|v| v["answer"]["kind"] = json!("maybe"))),
        ("span without end", edit(|v| drop(v["answer"].as_object_mut().unwrap().remove("end")))),
        ("yes with offsets", edit(|v| {
            v["qtype"] = json!("comparison");
            v["answer"] = json!({"kind": "yes", "doc": 0, "sentence": 0, "start": 0, "end": 1});
        })),
        ("bad qtype", edit(|v| v["qtype"] = json!("intersection"))),
        ("bad level", edit(|v| v["level"] = json!("trivial"))),
        ("fact triple", edit(|v| v["supporting_facts"][0] = json!([0, 1, 2]))),
        ("fact single", edit(|v| v["supporting_facts"][0] = json!([0]))),
        ("non-string token", edit(|v| v["question"][0] = json!(3))),
        ("entity extra key", edit(|v| v["entities"][0]["score"] = json!(0.9))),
        ("coref without doc", edit(|v| drop(v["coref"][0].as_object_mut().unwrap().remove("doc")))),
    ];
    let val = validator();
    for (name, v) in cases {
        assert!(!val.is_valid(&v), "schema accepted: {name}");
        assert!(!loader_accepts(&v), "loader accepted: {name}");
    }
}

#[test]
fn relational_defects_fail_loader_only() {
    let cases: Vec<(&str, Value)> = vec![
        ("answer span", edit(|v| v["answer"]["end"] = json!(3))),
        ("answer span", edit(|v| v["answer"]["start"] = json!(2))),
        ("answer span", edit(|v| v["answer"]["doc"] = json!(2))),
        ("answer kind yes or no", edit(|v| v["answer"] = json!({"kind": "no"}))),
        ("supporting fact", edit(|v| v["supporting_facts"][1] = json!([1, 1]))),
        ("entity mention", edit(|v| v["entities"][0]["end"] = json!(4))),
        ("coref mention", edit(|v| v["coref"][0]["clusters"][0][0]["sentence"] = json!(2))),
        ("coref mention", edit(|v| v["coref"][0]["doc"] = json!(1))),
    ];
    let schema = schema();
    let listed: Vec<&str> = schema["x-invariants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap())
        .collect();
    let val = validator();
    for (name, v) in cases {
        assert!(val.is_valid(&v), "schema rejected: {name}");
        assert!(!loader_accepts(&v), "loader accepted: {name}");
        assert!(listed.iter().any(|s| s.starts_with(name)), "not documented: {name}");
    }
}

#[test]
fn header_line_only_first() {
    let header = json!({"header": {"format": "hopqg-annotated/1", "annotators": {"ner": "1"}}});
    assert!(validator().is_valid(&header));
    assert!(!validator().is_valid(&json!({"header": {"format": "f", "note": 1}})));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let rec = base_span().to_string();
    std::fs::write(&path, format!("{header}\n{rec}\n")).unwrap();
    assert_eq!(load_and_validate(&path).unwrap().len(), 1);
    std::fs::write(&path, format!("{rec}\n{header}\n")).unwrap();
    assert!(load_and_validate(&path).is_err());
}
