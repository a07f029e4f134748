use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_degenlab");

fn degenlab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn degenlab")
}

const KINK: &str = r#"
[scenario]
name = "kink"

[[step]]
kind = "nonuniqueness"
a = 0.5
slopes = [1.0, 2.0]
n = 129
eps = 0.1

[[step]]
kind = "abp"
u = "x1^2 - 1"
f = "2*abs(x1)"
a = 1.0
ns = [51, 101]
expect_limit = 0.25
"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let out = degenlab(&["suite", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown suite"));
}

#[test]
fn run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("kink.toml");
    fs::write(&cfg, KINK).unwrap();
    let mut runs = vec![];
    for k in 0..2 {
        let dir = tmp.path().join(format!("out{k}"));
        let out = degenlab(&["--quiet", "--out", dir.to_str().unwrap(), "run", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        runs.push((csv_files(&dir), manifest["config_hash"].clone()));
    }
    assert!(!runs[0].0.is_empty());
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn bad_ellipticity_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        r#"
[scenario]
name = "bad"
[grid]
dim = 1
n = 33
[weight]
a = 0.5
[operator]
kind = "pucci-plus"
lambda = 2.0
Lambda = 1.0
"#,
    )
    .unwrap();
    let out = degenlab(&["--quiet", "--out", tmp.path().join("o").to_str().unwrap(), "run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("operator.Lambda"));
}

#[test]
fn failed_assertion_exits_one_and_keeps_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("wrong.toml");
    fs::write(&cfg, KINK.replace("expect_limit = 0.25", "expect_limit = 0.3")).unwrap();
    let dir = tmp.path().join("o");
    let out = degenlab(&["--quiet", "--out", dir.to_str().unwrap(), "run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], false);
    assert_eq!(manifest["steps"][1]["status"], "failed");
}

#[test]
fn nonuniqueness_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = degenlab(&["--out", tmp.path().to_str().unwrap(), "suite", "nonuniqueness"]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("nonuniqueness") && table.contains("PASS"));
    assert!(tmp.path().join("nonuniqueness/manifest.json").exists());
}
