use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddefloquet"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manufactured(dir: &Path, kappa: f64) -> PathBuf {
    let text = format!(
        r#"{{"name": "manufactured", "n": 1, "delays": [{}], "params": {{"kappa": {kappa}}}, "builtin": "manufactured"}}"#,
        PI / 2.0
    );
    write(dir, &format!("manufactured_{kappa}.json"), &text)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV artifact, after the comment block and the header.
fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn multipliers_report_the_trivial_multiplier_with_metadata() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    let out = dir.path().join("out");
    let o = run(&["multipliers", "--model", path(&model), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file = out.join("mult.csv");
    let text = std::fs::read_to_string(&file).unwrap();
    assert!(text.contains("# tool: ddefloquet "));
    assert!(text.contains("# model_sha256: "));
    assert!(text.contains("# discretization: mesh=32"));
    let (header, rows) = csv_rows(&file);
    assert_eq!(header, ["re", "im", "modulus", "sigma_re", "sigma_im", "alg_mult", "residual", "center"]);
    let trivial = rows.iter().find(|r| (f(&r[2]) - 1.0).abs() < 1e-6).expect("trivial multiplier");
    assert!(f(&trivial[6]) <= 1e-6);
}

#[test]
fn band_selects_center_rows() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    for band in [0.05, 0.99] {
        let out = dir.path().join(format!("band{band}"));
        let o = run(&["multipliers", "--model", path(&model), "--band", &band.to_string(), "--out", path(&out)]);
        assert!(o.status.success());
        let (_, rows) = csv_rows(&out.join("mult.csv"));
        let mut centers = 0;
        for r in &rows {
            let inside = (f(&r[2]) - 1.0).abs() <= band;
            assert_eq!(r[7] == "true", inside, "band {band}: {r:?}");
            centers += inside as usize;
        }
        assert!(centers >= 1);
        if band > 0.5 {
            assert!(centers >= 2);
        }
    }
}

#[test]
fn missing_model_is_a_configuration_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["multipliers", "--model", path(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_builtin_and_missing_orbit_are_configuration_errors() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"name": "x", "n": 1, "delays": [1.0], "params": {}, "builtin": "nope"}"#);
    assert_eq!(run(&["multipliers", "--model", path(&bad)]).status.code(), Some(2));
    let mg = write(
        dir.path(),
        "mg.json",
        r#"{"name": "mg", "n": 1, "delays": [1.3], "params": {}, "builtin": "mackey_glass"}"#,
    );
    assert_eq!(run(&["multipliers", "--model", path(&mg)]).status.code(), Some(2));
}

#[test]
fn eigfun_closes_periodically_for_trivial_multiplier() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    let out = dir.path().join("out");
    let o = run(&["eigfun", "--model", path(&model), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("eigfun.json"));
    assert_eq!(doc["metadata"]["tool"], "ddefloquet");
    let systems = doc["eigensystems"].as_array().unwrap();
    let trivial = systems
        .iter()
        .find(|s| (s["multiplier"]["value"]["re"].as_f64().unwrap() - 1.0).abs() < 1e-6)
        .expect("trivial eigensystem");
    assert!(trivial["periodic_closure"].as_f64().unwrap() <= 1e-8);
    assert_eq!(trivial["samples"].as_array().unwrap().len(), 64);
}

#[test]
fn adjoint_is_biorthogonal() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    let out = dir.path().join("out");
    let o = run(&["adjoint", "--model", path(&model), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("adjoint.json"));
    assert!(doc["biorthogonality"].as_f64().unwrap() <= 1e-6);
    for s in doc["eigensystems"].as_array().unwrap() {
        assert!(s["closure"].as_f64().unwrap() <= 1e-8);
    }
}

#[test]
fn period_doubling_request_on_subcritical_cycle_fails_numerically() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), -1.0);
    let o = run(&["normalform", "--model", path(&model), "--type", "pd", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no multiplier in the unit band near -1"));
}

#[test]
fn normalform_writes_report_and_samples() {
    let dir = TempDir::new().unwrap();
    let model = write(dir.path(), "twist.json", r#"{"name": "twist", "n": 2, "params": {}, "builtin": "ode:twist"}"#);
    let orbit = write(
        dir.path(),
        "circle.json",
        &format!(r#"{{"period": {}, "coefficients": [[0, 1, 0], [0, 0, 1]]}}"#, 2.0 * PI),
    );
    let out = dir.path().join("out");
    let o = run(&[
        "normalform", "--model", path(&model), "--orbit", path(&orbit), "--mesh", "16", "--dt", "0.05", "--tau-mesh",
        "32", "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("normalform.json"));
    assert_eq!(doc["bifurcation"], "fold");
    assert!(doc["metadata"]["orbit_sha256"].is_string());
    let quad = doc["coefficients"].as_array().unwrap().iter().find(|c| c["name"] == "quadratic").unwrap();
    assert!(quad["value"].as_f64().unwrap().abs() < 1e-8);
    let (header, rows) = csv_rows(&out.join("normalform_H.csv"));
    assert_eq!(header, ["order", "monomial", "tau", "theta", "component", "value"]);
    assert!(!rows.is_empty());
}

#[test]
fn simulation_follows_the_manufactured_cycle() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), -1.0);
    let out = dir.path().join("out");
    let o = run(&["simulate", "--model", path(&model), "--periods", "10", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("trajectory.csv"));
    assert_eq!(header, ["t", "x0"]);
    let t_end = f(&rows.last().unwrap()[0]);
    assert!((t_end - 20.0 * PI).abs() < 1e-9);
    let worst = rows.iter().map(|r| (f(&r[1]) - f(&r[0]).sin()).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn solve_orbit_refines_a_perturbed_guess() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    let orbit = write(dir.path(), "guess.json", r#"{"period": 6.2, "coefficients": [[0.02, 0.05, 0.97]]}"#);
    let out = dir.path().join("out");
    let o = run(&["multipliers", "--model", path(&model), "--orbit", path(&orbit), "--solve-orbit", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("mult.csv")).unwrap();
    let period: f64 = text.lines().find_map(|l| l.strip_prefix("# period: ")).unwrap().parse().unwrap();
    assert!((period - 2.0 * PI).abs() < 1e-8, "{period}");
    assert!(text.contains("# orbit_source: newton"));
    let solved = out.join("orbit.json");
    let doc = json(&solved);
    assert!((doc["period"].as_f64().unwrap() - 2.0 * PI).abs() < 1e-8);
    let again = dir.path().join("again");
    let o = run(&["multipliers", "--model", path(&model), "--orbit", path(&solved), "--out", path(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let model = manufactured(dir.path(), 1.0);
    let mut files = Vec::new();
    for run_id in 0..2 {
        let out = dir.path().join(format!("run{run_id}"));
        assert!(run(&["multipliers", "--model", path(&model), "--out", path(&out)]).status.success());
        assert!(run(&["eigfun", "--model", path(&model), "--out", path(&out)]).status.success());
        files.push((std::fs::read(out.join("mult.csv")).unwrap(), std::fs::read(out.join("eigfun.json")).unwrap()));
    }
    assert!(files[0] == files[1]);
}
