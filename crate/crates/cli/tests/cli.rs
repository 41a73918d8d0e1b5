use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_layerlab");

const IDENTITY: &str = r#"version = 1
[field]
dim = 2
coefficients = { kind = "constant", matrix = [[1.0, 0.0], [0.0, 1.0]] }
"#;

fn layerlab(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn successful_run_writes_tables_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{IDENTITY}[cell]\nexpect_a0 = [[1.0, 0.0], [0.0, 1.0]]\na0_tol = 1e-12\n");
    let o = layerlab(dir.path(), &cfg, &["cell"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("status OK"));
    let table = std::fs::read_to_string(dir.path().join("out/cell.csv")).unwrap();
    assert!(table.starts_with("config_hash,quantity,i,j,value\n"));
    assert!(dir.path().join("out/cell.txt").exists());
}

#[test]
fn failed_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{IDENTITY}[cell]\nexpect_a0 = [[2.0, 0.0], [0.0, 1.0]]\na0_tol = 1e-12\n");
    let o = layerlab(dir.path(), &cfg, &["cell"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL"));
}

#[test]
fn unknown_key_is_a_usage_error_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let o = layerlab(dir.path(), &format!("{IDENTITY}[cell]\ncutof = 8\n"), &["cell"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/cell/cutof"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn wrong_version_and_missing_section_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = layerlab(dir.path(), &IDENTITY.replace("version = 1", "version = 2"), &["cell"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/version"), "{}", stderr(&o));
    let o = layerlab(dir.path(), IDENTITY, &["green"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("out"), b"not a directory").unwrap();
    let o = layerlab(dir.path(), IDENTITY, &["cell"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_override_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |args: &[&str]| {
        let o = layerlab(dir.path(), IDENTITY, args);
        assert_eq!(o.status.code(), Some(0));
        let s = String::from_utf8(o.stdout).unwrap();
        s.lines().find_map(|l| l.strip_prefix("config hash ")).unwrap().to_string()
    };
    let a = hash(&["cell"]);
    assert_eq!(a, hash(&["cell"]));
    assert_ne!(a, hash(&["cell", "--seed", "9"]));
}
