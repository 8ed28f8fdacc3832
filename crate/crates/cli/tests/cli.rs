use std::path::Path;
use std::process::{Command, Output};

fn npfx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npfx"))
        .current_dir(dir)
        .args(args)
        .env_remove("NPFX_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = npfx(dir, args);
    assert!(out.status.success(), "npfx {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn trained(dir: &Path) {
    std::fs::write(dir.join("run.json"), r#"{"train": {"epochs": 1, "batch_size": 4}}"#).unwrap();
    ok(dir, &["gen", "--out", "data", "--windows", "4", "--no-timestamps"]);
    ok(dir, &["train", "--config", "run.json", "--data", "data", "--out", "m.npfxm", "--no-timestamps"]);
}

#[test]
fn bench_reports_every_requested_imputer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "data", "--windows", "3", "--domain", "b"]);
    let out = ok(d, &["bench", "--data", "data", "--mode", "extrapolation", "--report", "bench.json"]);
    let report = json(&d.join("bench.json"));
    assert_eq!(report["command"], "bench");
    assert!(report["generated_at"].is_u64());
    let names: Vec<_> = report["result"]["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["mean", "locf", "em", "of", "ot"]);
    assert!(d.join("bench.txt").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("locf"));
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = npfx(dir.path(), &["bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = npfx(dir.path(), &["gen", "--config", "bad.json", "--out", "data"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("epoch"), "{err}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = npfx(dir.path(), &["bench", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn looser_tolerance_needs_fewer_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let evals = |tol: &str| {
        let out = format!("imp{tol}");
        ok(d, &["impute", "--model", "m.npfxm", "--input", "data/window_00000.npfx", "--ode-tol", tol, "--out", &out]);
        json(&d.join(out).join("report.json"))["result"]["telemetry"]["evaluations"].as_u64().unwrap()
    };
    let (tight, loose) = (evals("1e-5"), evals("0.5"));
    assert!(loose < tight, "{loose} evaluations at 0.5 vs {tight} at 1e-5");
    assert!(d.join("imp0.5").join("imputed.npfx").exists());
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_npfx"));
        cmd.current_dir(d).args(["gen", "--out", out, "--windows", "2", "--no-timestamps"]).env_remove("NPFX_SEED").stdout(std::process::Stdio::null());
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("NPFX_SEED", e);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read(d.join(out).join("window_00000.npfx")).unwrap()
    };
    let flag = gen("a", Some("11"), Some("99"));
    assert_eq!(flag, gen("b", Some("11"), None));
    assert_eq!(gen("c", None, Some("99")), gen("d", Some("99"), None));
    assert_ne!(flag, gen("e", None, Some("99")));
}

#[test]
fn eval_elasticity_and_flow_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["gen", "--out", "b", "--windows", "2", "--domain", "b", "--no-timestamps"]);
    ok(d, &["eval", "--model", "m.npfxm", "--data", "b", "--reference", "data", "--report", "zs.json"]);
    assert!(json(&d.join("zs.json"))["result"]["degradation"].is_number());
    ok(d, &["elasticity", "--model", "m.npfxm", "--data", "data", "--tols", "1e-5,0.5", "--report", "el.json", "--no-timestamps"]);
    let el = json(&d.join("el.json"));
    assert_eq!(el["result"]["rows"].as_array().unwrap().len(), 2);
    assert!(el["generated_at"].is_null());
    ok(d, &["flow", "--model", "m.npfxm", "--input", "data/window_00001.npfx", "--out", "flow"]);
    let csvs = std::fs::read_dir(d.join("flow")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv")).count();
    assert!(csvs > 0);
}
