use std::path::Path;
use std::process::{Command, Output};

fn kkl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kkl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_dataset_writes_csv_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("ds.json"),
        r#"{"bank":{"kind":"nonlinear","sigma":{"kind":"tanh_blend","a_fast":-5,"a_slow":-0.5},"lambdas":[2,4,6],"k":1},"grid":6}"#,
    );
    let out = dir.path().join("sub/ds.csv");
    let o = kkl(&["gen-dataset", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x1,x2,z1,z2,z3");
    assert_eq!(lines.count(), 36);
    let meta = json(&dir.path().join("sub/ds.meta.json"));
    assert_eq!(meta["grid"], 6);
    assert_eq!(meta["washout"], 10.0);
}

#[test]
fn verify_passes_on_defaults() {
    let o = kkl(&["verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["two_path_max_diff"].as_f64().unwrap() < 1e-12);
    assert!(v["lemma_max_residual"].as_f64().unwrap() < 1e-5);
    assert!(v["cond_v"].as_f64().unwrap() > 1.0);
}

#[test]
fn verify_rejects_an_expanding_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("v.json"), r#"{"sigma":{"kind":"linear","a":1.0}}"#);
    let o = kkl(&["verify", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn omega_scaling_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("omega.csv");
    let js = dir.path().join("omega.json");
    let o = kkl(&[
        "scaling",
        "--quantity",
        "omega",
        "--lambdas",
        "10,20,40,80",
        "--out",
        csv.to_str().unwrap(),
        "--json",
        js.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "lambda,norm");
    assert_eq!(text.lines().count(), 5);
    let v = json(&js);
    assert_eq!(v["quantity"], "omega");
    assert_eq!(v["pass"], true);
    assert!((v["fitted_slope"].as_f64().unwrap() + 2.0).abs() <= 0.3);
}

#[test]
fn first_order_r_scaling_on_stdout() {
    let o = kkl(&["scaling", "--quantity", "R", "--lambdas", "10,20,40,80", "--m", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let start = out.find('{').unwrap();
    let v: serde_json::Value = serde_json::from_str(&out[start..]).unwrap();
    assert_eq!(v["m"], 1);
    assert!((v["fitted_slope"].as_f64().unwrap() + 1.0).abs() <= 0.3);
}

#[test]
fn lipschitz_study_reports_a_floor() {
    let dir = tempfile::tempdir().unwrap();
    let js = dir.path().join("lip.json");
    let o = kkl(&[
        "scaling",
        "--quantity",
        "R",
        "--lipschitz",
        "--lambdas",
        "10,20,40,80",
        "--out",
        dir.path().join("lip.csv").to_str().unwrap(),
        "--json",
        js.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(&js)["lambda_floor"].as_f64().is_some());
}

#[test]
fn scaling_argument_errors() {
    assert_eq!(kkl(&["scaling", "--quantity", "omega", "--lambdas", "10,20,40"]).status.code(), Some(2));
    assert_eq!(
        kkl(&["scaling", "--quantity", "omega", "--lipschitz", "--lambdas", "10,20,40,80"]).status.code(),
        Some(2)
    );
    assert_eq!(kkl(&["scaling", "--quantity", "theta", "--lambdas", "10"]).status.code(), Some(2));
}

#[test]
fn run_then_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("run.json"),
        r#"{"dataset":{"grid":15,"snapshots":2},"x0_count":3,"horizon":4.0,"convergence_tol_x":0.5}"#,
    );
    let out = dir.path().join("out");
    let o = kkl(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--generate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.contains("conv time mean") && printed.contains("nonlinear"));
    let s1 = json(&out.join("scenario1.json"));
    assert_eq!(s1["observers"][0]["tol_x"], 0.5);
    assert_eq!(s1["observers"][0]["values"].as_array().unwrap().len(), 3);

    let stem = dir.path().join("again");
    let o = kkl(&["table", "--in", out.to_str().unwrap(), "--out", stem.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&dir.path().join("again.json")), json(&out.join("table.json")));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("again.txt")).unwrap(),
        std::fs::read_to_string(out.join("table.txt")).unwrap()
    );
}

#[test]
fn run_without_datasets_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = kkl(&["run", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn table_needs_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = kkl(&["table", "--in", dir.path().to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
