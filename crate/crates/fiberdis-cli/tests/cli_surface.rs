//! End-to-end checks of the command-line surface: exit codes, artifact
//! schemas, and config-file loading.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fiberdis")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fiberdis-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

#[test]
fn disintegrate_emits_pinned_csv_schema() {
    let out = tmp("disint");
    let output = run(&[
        "disintegrate",
        "--system",
        "doubling-digit",
        "--observable",
        "z^2",
        "--tol",
        "1e-6",
        "--grid",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,vbar,error_bound");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        let vbar: f64 = cols[1].parse().unwrap();
        let err: f64 = cols[2].parse().unwrap();
        assert!((vbar - 0.125).abs() <= err, "vbar {vbar} err {err}");
        assert!(err <= 1.1e-6);
    }
    let trace = std::fs::read_to_string(out.with_extension("trace.json")).unwrap();
    assert!(trace.contains("\"apriori_bound\""));
}

#[test]
fn eta_summary_brackets_the_value() {
    let out = tmp("eta");
    let output = run(&[
        "eta",
        "--system",
        "doubling-cos",
        "--observable",
        "z",
        "--tol",
        "1e-4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let json = std::fs::read_to_string(out.with_extension("json")).unwrap();
    assert!(json.contains("\"converged\":true"));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with("n,lower,upper,width,quad_err,trunc_err\n"));
}

#[test]
fn config_error_exits_2() {
    let output = run(&["eta", "--system", "no-such-system", "--observable", "z"]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("\"error\""), "stderr: {stderr}");

    let output = run(&["eta", "--system", "doubling-cos", "--observable", "1 + * 2"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn regularity_emits_json_schema() {
    let out = tmp("reg");
    let output = run(&[
        "regularity",
        "--system",
        "doubling-cos",
        "--observable",
        "z",
        "--suite",
        "holder",
        "--n-list",
        "1..4",
        "--pair-samples",
        "1024",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let json = std::fs::read_to_string(out.with_extension("json")).unwrap();
    for key in ["\"suite\"", "\"system\"", "\"observable\"", "\"params\"", "\"tables\"", "\"fitted\"", "\"verdict\""] {
        assert!(json.contains(key), "missing {key} in {json}");
    }
    assert!(json.contains("\"verdict\":\"PASS\""));
}

#[test]
fn custom_config_system_runs() {
    let cfg_path = tmp("custom.cfg");
    std::fs::write(
        &cfg_path,
        r#"
[system]
name = custom
label = tripling
branch_endpoints = 0, 0.3333333333333333, 0.6666666666666666, 1
branch_0 = 3*x
branch_1 = 3*x - 1
branch_2 = 3*x - 2
lambda = 1.0986122886681098
c_lambda = 1
c_j = 0.1
c_j_prime = 1.1
c_d = 0.1
min_slope = 3
fiber = z/4 + sin(2*pi*x)/4
fiber_min = -1
fiber_max = 1
z0 = 0
lambda_s = 1.3862943611198906

[density]
resolution = 256
tol = 1e-9
"#,
    )
    .unwrap();
    let out = tmp("custom-run");
    let output = run(&[
        "disintegrate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--observable",
        "z",
        "--tol",
        "1e-5",
        "--grid",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.lines().count() > 10);
}

#[test]
fn suspend_emits_grid() {
    let out = tmp("susp");
    let output = run(&[
        "suspend",
        "--system",
        "doubling-digit",
        "--observable",
        "u*z",
        "--roof",
        "1 + x",
        "--roof-inf",
        "1",
        "--tol",
        "1e-4",
        "--grid",
        "8",
        "--u-grid",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with("x,u,vbar,error_bound\n"));
    assert_eq!(csv.lines().count(), 1 + 8 * 3);
}

#[test]
fn density_operator_iteration_flat_for_doubling() {
    let out = tmp("density");
    let output = run(&[
        "density",
        "--system",
        "doubling-pure",
        "--method",
        "operator-iteration",
        "--resolution",
        "256",
        "--tol",
        "1e-10",
        "--grid",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,phi,dphi");
    for line in lines {
        let phi: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((phi - 1.0).abs() < 1e-10);
    }
}
