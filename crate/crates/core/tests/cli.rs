//! Command-line behaviour: exit codes, output artifacts and reproducibility.

use std::path::Path;
use std::process::Command;

use channel_ssm::io::read_expansion;

const BIN: &str = env!("CARGO_BIN_EXE_channel-ssm");

const SSM_CONFIG: &str = r#"{
  "model": "newtonian",
  "grid": { "k": 1.02056, "n1": 4, "n2": 32 },
  "params": { "re": 3600 },
  "task": "lift",
  "ssm": { "beta_split": -0.002, "gap_tol": 1e-4, "order": 3, "style": "mixed" },
  "lift": { "samples": 16 }
}"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_bin(config: &Path, out: &Path) -> std::process::Output {
    Command::new(BIN).arg(config).arg("--output-dir").arg(out).args(["--log-level", "warn"]).output().unwrap()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{ "model": "newtonian", "grid": { "k": 1.0, "n1": 2, "n2": 16 }, "params": { "re": 100 }, "task": "laminar", "colour": 1 }"#);
    let o = run_bin(&cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn invalid_parameters_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{ "model": "newtonian", "grid": { "k": 1.0, "n1": 2, "n2": 16 }, "params": { "re": -1 }, "task": "ssm" }"#);
    let o = run_bin(&cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("re must be") && err.contains("beta_split"), "{err}");
}

#[test]
fn locked_output_directory_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".channel-ssm.lock"), "").unwrap();
    let cfg = write_config(tmp.path(), r#"{ "model": "newtonian", "grid": { "k": 1.0, "n1": 2, "n2": 16 }, "params": { "re": 100 }, "task": "laminar" }"#);
    let o = run_bin(&cfg, &out);
    assert_eq!(o.status.code(), Some(6));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn laminar_task_writes_state_and_physical_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), r#"{ "model": "newtonian", "grid": { "k": 1.0, "n1": 2, "n2": 16 }, "params": { "re": 100 }, "task": "laminar", "physical_nx": 8 }"#);
    let o = run_bin(&cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let files: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap()).collect();
    assert_eq!(files, ["state.json", "physical.csv"]);
    let state = channel_ssm::io::read_state(&out.join("state.json")).unwrap();
    assert_eq!((state.n1, state.n2), (2, 16));
    assert!(!out.join(".channel-ssm.lock").exists());
}

#[test]
fn ssm_run_reports_internal_resonance_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SSM_CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run_bin(&cfg, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("ssm.json")).unwrap()).unwrap();
    let internal: Vec<&serde_json::Value> =
        file["resonances"].as_array().unwrap().iter().filter(|r| r["kind"] == "internal").map(|r| &r["alpha"]).collect();
    let table = read_expansion(&a.join("ssm.json")).unwrap();
    assert_eq!((table.r, table.order), (2, 3));
    assert!(internal.contains(&&serde_json::json!([2, 1])) && internal.contains(&&serde_json::json!([1, 2])), "{internal:?}");

    let (ma, mb) = (manifest(&a), manifest(&b));
    let radial = ma["summary"]["polar"]["radial"].as_array().unwrap();
    assert!(radial[0].as_f64().unwrap() < 0.0 && radial[1].as_f64().unwrap() > 0.0);
    // identical inputs give byte-identical artifacts
    assert_eq!(ma["outputs"], mb["outputs"]);
    for f in ["spectrum.csv", "ssm.json", "orbit.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
}
