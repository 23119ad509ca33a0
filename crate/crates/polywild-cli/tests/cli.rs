use std::path::Path;
use std::process::Command;

fn polywild(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_polywild"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).expect("report written")).expect("valid json")
}

#[test]
fn verify_config_passes_on_default_bundle() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = polywild(d.path(), &["verify-config", "--samples", "16"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(json(&d.path().join("properties.json"))["pass"], true);
}

#[test]
fn zero_seed_certifies() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = polywild(d.path(), &["seed"]);
    assert_eq!(code, 0, "{err}");
    let v = json(&d.path().join("seed.json"));
    assert_eq!(v["check"]["failures"], 0);
    assert!(v["eps0"].is_null());
}

#[test]
fn bad_configuration_exits_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(polywild(d.path(), &["run", "--rho=-1"]).0, 2);
    assert_eq!(polywild(d.path(), &["run", "--tolerance-scale", "0"]).0, 2);
    assert_eq!(polywild(d.path(), &["seed", "--resolution", "0"]).0, 2);
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(polywild(d.path(), &["seed", "--config", cfg.to_str().unwrap()]).0, 2);
    assert_eq!(polywild(d.path(), &["seed", "--bundle", "/nonexistent.json"]).0, 2);
}

#[test]
fn single_stage_run_writes_report() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = polywild(d.path(), &["run", "--stages", "1"]);
    assert_eq!(code, 0, "{err}");
    let v = json(&d.path().join("report.json"));
    assert_eq!(v["pass"], true);
    assert_eq!(v["stages"].as_array().unwrap().len(), 1);
}

#[test]
fn export_writes_leaf_grids() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = polywild(d.path(), &["export", "--stages", "1", "--grid", "1"]);
    assert_eq!(code, 0, "{err}");
    let idx = json(&d.path().join("field").join("index.json"));
    let n = idx["leaves"].as_array().unwrap().len();
    assert!(n > 0);
    assert!(d.path().join("field").join(format!("leaf_{}.csv", n - 1)).exists());
}
