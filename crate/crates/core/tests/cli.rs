mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

use common::{assert_schema_valid, configs_dir, read_json};

fn heed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heed"))
        .args(args)
        .output()
        .expect("spawn heed")
}

fn error_body(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stderr"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One `experiment` run on the smoke config, shared by the tests below.
fn experiment() -> &'static TempDir {
    static CELL: OnceLock<TempDir> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = configs_dir().join("smoke.toml");
        let out = heed(&["experiment", "--config", p(&cfg), "--out", p(dir.path())]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("C4-C3"));
        dir
    })
}

#[test]
fn experiment_writes_valid_reports() {
    let dir = experiment().path();
    for name in ["aggregate.json", "run_C1_seed0.json", "run_C4_seed1.json"] {
        assert_schema_valid(&read_json(&dir.join(name)));
    }
    for name in ["teacher_seed0.ckpt", "student_C3_seed1.ckpt"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
}

#[test]
fn diagnose_reproduces_the_run_diagnostics() {
    let dir = experiment().path();
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("diag.json");
    let tokens = tmp.path().join("tokens.tsv");
    let cfg = configs_dir().join("smoke.toml");
    let o = heed(&[
        "diagnose",
        "--checkpoint",
        p(&dir.join("student_C4_seed0.ckpt")),
        "--teacher",
        p(&dir.join("teacher_seed0.ckpt")),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--tokens",
        p(&tokens),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = read_json(&out);
    assert_schema_valid(&diag);
    assert_eq!(diag["kind"], "diagnostics");
    let run = read_json(&dir.join("run_C4_seed0.json"));
    assert_eq!(diag["diagnostics"], run["diagnostics"]);
    assert_eq!(diag["config_hash"], run["config_hash"]);
    let table = std::fs::read_to_string(&tokens).unwrap();
    assert!(table.lines().count() > 1);
}

#[test]
fn diagnose_rejects_mismatched_teacher() {
    let dir = experiment().path();
    let tmp = TempDir::new().unwrap();
    let o = heed(&[
        "diagnose",
        "--checkpoint",
        p(&dir.join("student_C4_seed0.ckpt")),
        "--teacher",
        p(&dir.join("teacher_seed1.ckpt")),
        "--out",
        p(&tmp.path().join("d.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_body(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("disagree"));
}

#[test]
fn compare_prints_and_writes_deltas() {
    let dir = experiment().path();
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("cmp.json");
    let mut args = vec!["compare".to_string()];
    for c in ["C1", "C3", "C4"] {
        for s in 0..2 {
            args.push(p(&dir.join(format!("run_{c}_seed{s}.json"))).to_string());
        }
    }
    args.extend(["--out".into(), p(&json).into()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = heed(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("C4-C3") && stdout.contains("C4-C1"));

    let cmp = read_json(&json);
    let agg = read_json(&dir.join("aggregate.json"));
    assert_eq!(cmp, agg["comparisons"]);
}

#[test]
fn compare_refuses_mixed_configs() {
    let dir = experiment().path();
    let tmp = TempDir::new().unwrap();
    let mut other = read_json(&dir.join("run_C3_seed0.json"));
    other["config_hash"] = Value::from("f".repeat(64));
    let other_path = tmp.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let o = heed(&["compare", p(&dir.join("run_C4_seed0.json")), p(&other_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "hash_mismatch");
}

#[test]
fn cache_encode_inspect_round_trip() {
    let tmp = TempDir::new().unwrap();
    let tsv = tmp.path().join("in.tsv");
    std::fs::write(
        &tsv,
        "sample_id\tn_positions\trho_tilde\n3\t3\t0,0.5,1\n8\t2\t0.2,0.8\n",
    )
    .unwrap();
    let bin = tmp.path().join("a.cache");
    let o = heed(&["cache", "encode", "--in", p(&tsv), "--out", p(&bin)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let dump = tmp.path().join("dump.tsv");
    assert!(
        heed(&["cache", "inspect", "--in", p(&bin), "--out", p(&dump)])
            .status
            .success()
    );
    let text = std::fs::read_to_string(&dump).unwrap();
    assert!(text.starts_with("sample_id\tn_positions\trho_tilde\n3\t3\t0,"));

    // dequantized values re-encode to the same bytes
    let again = tmp.path().join("b.cache");
    assert!(
        heed(&["cache", "encode", "--in", p(&dump), "--out", p(&again)])
            .status
            .success()
    );
    assert_eq!(std::fs::read(&bin).unwrap(), std::fs::read(&again).unwrap());

    let stdout = heed(&["cache", "inspect", "--in", p(&bin), "--out", "-"]);
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), text);
}

#[test]
fn cache_from_config_covers_the_training_set() {
    let tmp = TempDir::new().unwrap();
    let bin = tmp.path().join("train.cache");
    let cfg = configs_dir().join("smoke.toml");
    let o = heed(&[
        "cache",
        "encode",
        "--in",
        p(&cfg),
        "--out",
        p(&bin),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("32 samples"));
}

#[test]
fn bad_inputs_give_json_errors() {
    let tmp = TempDir::new().unwrap();
    let junk = tmp.path().join("junk.cache");
    std::fs::write(&junk, b"definitely not a cache").unwrap();
    let o = heed(&["cache", "inspect", "--in", p(&junk), "--out", "-"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "cache");

    let tsv = tmp.path().join("bad.tsv");
    std::fs::write(&tsv, "sample_id\tn_positions\trho_tilde\n1\t3\t0.1,0.2\n").unwrap();
    let o = heed(&[
        "cache",
        "encode",
        "--in",
        p(&tsv),
        "--out",
        p(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_body(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("declares 3"));

    let missing = tmp.path().join("nope.toml");
    let o = heed(&["experiment", "--config", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "io");

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seeds = []\nconditions = [\"C4\"]\n").unwrap();
    let o = heed(&["experiment", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "config");
}

#[test]
fn usage_errors_exit_2() {
    let o = heed(&["train", "--condition", "C9"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_body(&o)["error"]["kind"], "usage");
    let o = heed(&["compare", "only_one.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = heed(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("experiment"));
}
