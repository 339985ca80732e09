mod common;

use std::path::Path;
use std::process::Command;

use common::fixture_path;
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
}

impl Run {
    fn report(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }

    fn result(&self) -> Value {
        self.report()["deterministic"]["result"].clone()
    }
}

fn gdtre(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_gdtre")).args(args).env("GDTRE_THREADS", "2").output().unwrap();
    Run { code: out.status.code().unwrap(), stdout: String::from_utf8(out.stdout).unwrap() }
}

fn fixture(name: &str) -> String {
    fixture_path(name).to_string_lossy().into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scale_numbers(v: &mut Value, factor: f64) {
    match v {
        Value::Number(n) => *v = serde_json::json!(n.as_f64().unwrap() * factor),
        Value::Array(items) => items.iter_mut().for_each(|x| scale_numbers(x, factor)),
        _ => {}
    }
}

#[test]
fn validate_exit_codes() {
    let ok = gdtre(&["validate", &fixture("mjls_game")]);
    assert_eq!(ok.code, 0);
    assert_eq!(ok.result()["status"], "valid");
    let bad = gdtre(&["validate", &fixture("negative_probability")]);
    assert_eq!(bad.code, 2);
    assert_eq!(bad.report()["deterministic"]["exit_code"], 2);
    assert_eq!(gdtre(&["validate", &fixture("malformed")]).code, 3);
    assert_eq!(gdtre(&["validate", "/nonexistent/spec.json"]).code, 3);
}

#[test]
fn solve_exit_codes() {
    assert_eq!(gdtre(&["solve", &fixture("negative_state_weight")]).code, 2);
    let stuck = gdtre(&["solve", &fixture("no_convergence")]);
    assert_eq!(stuck.code, 4);
    assert_eq!(stuck.result()["status"], "no-convergence");
    let unstable = gdtre(&["solve", &fixture("unstable_unobserved")]);
    assert_eq!(unstable.code, 5);
    assert_eq!(unstable.result()["status"], "not-stabilizing");
    assert_eq!(gdtre(&["detect", &fixture("unstable_unobserved")]).code, 5);
}

#[test]
fn solve_reports_the_solution() {
    let run = gdtre(&["solve", &fixture("lqr_limb")]);
    assert_eq!(run.code, 0);
    let x = run.result()["solution"]["X"][0][0][0][0].as_f64().unwrap();
    assert!((x - common::golden()).abs() < 1e-9);
    let two = gdtre(&["solve", &fixture("period2")]).result();
    assert_eq!(two["solution"]["X"].as_array().unwrap().len(), 2);
    assert!(two["full_information"]["K"].is_array());
}

#[test]
fn short_verify_run_fails_the_statistical_check() {
    let run = gdtre(&["verify", &fixture("scalar_game_noisy"), "--trajectories", "4", "--perturbations", "2", "--seed", "2"]);
    assert_eq!(run.code, 6, "{}", run.stdout);
    assert_eq!(run.result()["monte_carlo"]["passed"], false);
}

#[test]
fn verify_rejects_a_perturbed_solution_file() {
    let dir = TempDir::new().unwrap();
    let good = dir.path().join("solution.json");
    assert_eq!(gdtre(&["solve", &fixture("scalar_game"), "--out", path_str(&good)]).code, 0);
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&good).unwrap()).unwrap();
    let loaded = gdtre(&["verify", &fixture("scalar_game"), "--solution", path_str(&good), "--trajectories", "2000"]);
    assert_eq!(loaded.code, 0, "{}", loaded.stdout);
    scale_numbers(&mut doc["deterministic"]["result"]["solution"]["X"], 1.1);
    let bad = dir.path().join("scaled.json");
    std::fs::write(&bad, doc.to_string()).unwrap();
    let run = gdtre(&["verify", &fixture("scalar_game"), "--solution", path_str(&bad)]);
    assert_eq!(run.code, 5);
    assert_eq!(run.result()["status"], "residual-check-failed");
}

#[test]
fn zero_initial_state_passes_vacuously() {
    let run = gdtre(&["verify", &fixture("mjls_game"), "--x0", "0", "--trajectories", "10", "--perturbations", "3"]);
    assert_eq!(run.code, 0, "{}", run.stdout);
    assert_eq!(run.result()["monte_carlo"]["game_value"], 0.0);
    assert_eq!(gdtre(&["verify", &fixture("mjls_game"), "--x0", "1,2,3"]).code, 3);
}

#[test]
fn digest_tracks_the_content() {
    let dir = TempDir::new().unwrap();
    let base = gdtre(&["validate", &fixture("scalar_game")]).report()["deterministic"]["spec_digest"].clone();
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(fixture_path("scalar_game")).unwrap()).unwrap();
    let copy = dir.path().join("same.json");
    std::fs::write(&copy, serde_json::to_string(&doc).unwrap()).unwrap();
    assert_eq!(gdtre(&["validate", path_str(&copy)]).report()["deterministic"]["spec_digest"], base);
    doc["weights"]["M"][0][0][0][0] = serde_json::json!(1.5);
    let edited = dir.path().join("edited.json");
    std::fs::write(&edited, doc.to_string()).unwrap();
    let other = gdtre(&["validate", path_str(&edited)]).report()["deterministic"]["spec_digest"].clone();
    assert!(other.is_string());
    assert_ne!(other, base);
}

#[test]
fn csv_output() {
    let run = gdtre(&["solve", &fixture("mjls_game"), "--format", "csv"]);
    assert_eq!(run.code, 0);
    let lines: Vec<&str> = run.stdout.lines().collect();
    assert_eq!(lines[0], "phase,mode,row,col,value");
    assert_eq!(lines.len(), 1 + 2 * 4);
    let sim = gdtre(&["simulate", &fixture("mjls_game"), "--format", "csv", "--trajectories", "50", "--horizon", "6"]);
    assert_eq!(sim.code, 0);
    assert!(sim.stdout.starts_with("step,all,mode0,mode1\n"));
    assert_eq!(sim.stdout.lines().count(), 8);
}

#[test]
fn membership_and_detect_accept_input_files() {
    let dir = TempDir::new().unwrap();
    let gains = dir.path().join("gains.json");
    std::fs::write(&gains, r#"{"K": [[[[-0.6180339887498949]]]], "W": [[[[0.0]]]]}"#).unwrap();
    let run = gdtre(&["membership", &fixture("scalar_game"), "--gains", path_str(&gains)]);
    assert_eq!(run.code, 0, "{}", run.stdout);
    assert_eq!(run.result()["status"], "member");
    std::fs::write(&gains, r#"{"K": [[[[1.0]]]]}"#).unwrap();
    assert_eq!(gdtre(&["membership", &fixture("scalar_game"), "--gains", path_str(&gains)]).code, 3);

    let injection = dir.path().join("h.json");
    std::fs::write(&injection, r#"{"H": [[[[]]]]}"#).unwrap();
    let run = gdtre(&["detect", &fixture("unstable_unobserved"), "--injection", path_str(&injection)]);
    assert_eq!(run.code, 5, "{}", run.stdout);
    assert_eq!(run.result()["status"], "not-certified");
    assert_eq!(gdtre(&["detect", &fixture("scalar_game")]).code, 0);
}

#[test]
fn out_file_holds_the_same_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report.json");
    let run = gdtre(&["solve", &fixture("period2"), "--out", path_str(&out)]);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written["deterministic"], run.report()["deterministic"]);
    assert!(written["timings"]["elapsed_seconds"].is_number());
}
