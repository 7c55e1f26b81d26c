#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::Value;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// Panics with every violation when `doc` does not match the report schema.
pub fn assert_schema_valid(doc: &Value) {
    let schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/report.v1.json"));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(
        errors.is_empty(),
        "schema violations:\n{}",
        errors.join("\n")
    );
}
