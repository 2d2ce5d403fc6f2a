use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dln-landscape"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is valid JSON")
}

fn gen_toy(dir: &Path) {
    let out = run(dir, &["gen-data", "--dx", "10", "--dy", "4", "--m", "100", "--seed", "7", "--out-prefix", "toy"]);
    assert!(out.status.success());
}

const DATA: [&str; 4] = ["--x", "toy_X.csv", "--y", "toy_Y.csv"];

fn construct(dir: &Path, dims: &str, extra: &[&str], out: &str) {
    let mut args = vec!["construct", "--dims", dims, "--out", out];
    args.extend_from_slice(&DATA);
    args.extend_from_slice(extra);
    let o = run(dir, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn classify_json(dir: &Path, weights: &str) -> Value {
    let mut args = vec!["--json", "classify", "--weights", weights];
    args.extend_from_slice(&DATA);
    json_stdout(&run(dir, &args))
}

#[test]
fn gen_data_writes_three_files_and_holds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--json", "gen-data", "--dx", "10", "--dy", "4", "--m", "100", "--seed", "7", "--out-prefix", "toy"]);
    let report = json_stdout(&out);
    assert_eq!(report["holds"], Value::Bool(true));
    for f in ["toy_X.csv", "toy_Y.csv", "toy_assumption.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(dir.path().join("toy_X.csv")).unwrap();
    assert!(header.starts_with("# rows=10 cols=100\n"));
}

#[test]
fn gen_data_is_byte_identical_for_same_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_toy(a.path());
    gen_toy(b.path());
    for f in ["toy_X.csv", "toy_Y.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn gen_data_rejects_wide_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--dx", "4", "--dy", "10", "--m", "100", "--out-prefix", "bad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("bad_X.csv").exists());
}

#[test]
fn gen_data_bundle_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["gen-data", "--dx", "5", "--dy", "3", "--m", "40", "--out-prefix", "t", "--bundle-out", "b.json"],
    );
    assert!(out.status.success());
    let b: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(b["lambdas"].as_array().unwrap().len(), 3);
    assert_eq!(b["U"].as_array().unwrap().len(), 3);
    assert_eq!(b["V_Q_cols"].as_array().unwrap().len(), 40);
}

#[test]
fn classify_minimizer_and_saddles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    construct(d, "10,6,5,4", &["--example-rank", "4"], "min.json");
    let c = classify_json(d, "min.json");
    assert_eq!(c["verdict"], "GlobalMinimizer");
    assert_eq!(c["r"], 4);
    assert!(c["witness"].is_null());

    construct(d, "10,6,5,4", &["--example-rank", "2", "--tightened"], "t.json");
    let c = classify_json(d, "t.json");
    assert_eq!(c["verdict"], "NonStrictSaddle");
    assert_eq!(c["support"], serde_json::json!([1, 2]));
    for p in c["pivots"].as_array().unwrap() {
        assert_eq!(p["tightened"], Value::Bool(true));
        for k in ["i", "j", "rank1", "rank2"] {
            assert!(p[k].is_u64());
        }
    }

    construct(d, "10,6,5,4", &["--example-rank", "2"], "n.json");
    let c = classify_json(d, "n.json");
    assert_eq!(c["verdict"], "StrictSaddle");
    assert_eq!(c["witness"]["dims"], serde_json::json!([10, 6, 5, 4]));
    assert!(c["witness_info"]["c2"].as_f64().unwrap() < 0.0);
}

#[test]
fn classify_zero_weights_three_layers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    let zeros = serde_json::json!({
        "dims": [10, 3, 3, 4],
        "layers": [vec![vec![0.0; 10]; 3], vec![vec![0.0; 3]; 3], vec![vec![0.0; 3]; 4]],
    });
    std::fs::write(d.join("z.json"), zeros.to_string()).unwrap();
    assert_eq!(classify_json(d, "z.json")["verdict"], "NonStrictSaddle");
}

#[test]
fn classify_random_weights_is_not_critical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    let layers: Vec<Vec<Vec<f64>>> = [(3, 10), (4, 3)]
        .iter()
        .map(|&(r, c)| (0..r).map(|i| (0..c).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect()).collect())
        .collect();
    let w = serde_json::json!({"dims": [10, 3, 4], "layers": layers});
    std::fs::write(d.join("r.json"), w.to_string()).unwrap();
    let c = classify_json(d, "r.json");
    assert_eq!(c["verdict"], "NotCritical");
    assert!(c["gradient_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn human_readable_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    construct(d, "10,5,4", &["--example-rank", "4"], "min.json");
    let mut args = vec!["classify", "--weights", "min.json"];
    args.extend_from_slice(&DATA);
    let out = run(d, &args);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("GlobalMinimizer"));
}

#[test]
fn construct_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    let mut args = vec!["construct", "--dims", "10,5,4", "--example-rank", "2", "--tightened", "--out", "w.json"];
    args.extend_from_slice(&DATA);
    assert_eq!(run(d, &args).status.code(), Some(2));
    let mut args = vec!["construct", "--dims", "9,5,4", "--example-rank", "2", "--out", "w.json"];
    args.extend_from_slice(&DATA);
    assert_eq!(run(d, &args).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), "{not json").unwrap();
    let mut args = vec!["classify", "--weights", "bad.json"];
    args.extend_from_slice(&DATA);
    assert_eq!(run(d, &args).status.code(), Some(2));
}

#[test]
fn construct_from_spec_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    construct(d, "10,5,4", &["--example-rank", "3", "--spec-out", "spec.json"], "a.json");
    construct(d, "10,5,4", &["--spec", "spec.json"], "b.json");
    let a = std::fs::read_to_string(d.join("a.json")).unwrap();
    let b = std::fs::read_to_string(d.join("b.json")).unwrap();
    assert_eq!(a, b);
    let spec: Value = serde_json::from_str(&std::fs::read_to_string(d.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["support"], serde_json::json!([1, 2, 3]));
    assert!(spec["d_blocks"].is_null());
}

#[test]
fn probe_reports_negative_curvature_at_strict_saddle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    construct(d, "10,6,5,4", &["--example-rank", "2"], "n.json");
    for mode in ["dense", "probe"] {
        let mut args = vec!["--json", "probe", "--weights", "n.json", "--mode", mode, "--samples", "5"];
        args.extend_from_slice(&DATA);
        let p = json_stdout(&run(d, &args));
        assert!(p["lambda_min"].as_f64().unwrap() < 0.0);
        assert_eq!(p["c2_samples"].as_array().unwrap().len(), 5);
        assert!(p["witness"].is_object());
    }
    construct(d, "10,6,5,4", &["--example-rank", "4"], "min.json");
    let mut args = vec!["--json", "probe", "--weights", "min.json"];
    args.extend_from_slice(&DATA);
    let p = json_stdout(&run(d, &args));
    assert!(p["witness"].is_null());
}

#[test]
fn enumerate_lists_all_supports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    let mut args = vec!["--json", "enumerate", "--dims", "10,6,4"];
    args.extend_from_slice(&DATA);
    let e = json_stdout(&run(d, &args));
    let entries = e.as_array().unwrap();
    assert_eq!(entries.len(), 16);
    let plateaus = entries.iter().filter(|x| x["kind_hint"] == "plateau_candidate").count();
    assert_eq!(plateaus, 5);
}

#[test]
fn experiment_smoke_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"n_runs": 1, "max_epochs": 300}"#).unwrap();
    let start = std::time::Instant::now();
    let out = run(d, &["--json", "experiment", "--config", "c.json", "--out-prefix", "e", "--threads", "1"]);
    assert!(start.elapsed().as_secs() < 10);
    let s = json_stdout(&out);
    assert_eq!(s["summaries"].as_array().unwrap().len(), 2);
    let runs = std::fs::read_to_string(d.join("e_runs.csv")).unwrap();
    assert!(runs.starts_with("run,variant,escape_epoch,final_loss,diverged\n"));
    assert_eq!(runs.lines().count(), 3);
    assert!(d.join("e_histogram.csv").exists());
    assert!(d.join("e_summary.json").exists());
}

#[test]
fn experiment_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), "{\"n_runs\": ").unwrap();
    assert_eq!(run(d, &["experiment", "--config", "c.json", "--out-prefix", "e"]).status.code(), Some(2));
    std::fs::write(d.join("c.json"), r#"{"runs": 3}"#).unwrap();
    assert_eq!(run(d, &["experiment", "--config", "c.json", "--out-prefix", "e"]).status.code(), Some(2));
}

#[test]
fn version_and_help() {
    let v = bin().arg("--version").output().unwrap();
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
    let h = bin().arg("--help").output().unwrap();
    assert!(h.status.success());
    for sub in ["gen-data", "construct", "classify", "probe", "enumerate", "experiment"] {
        assert!(String::from_utf8_lossy(&h.stdout).contains(sub));
    }
}
