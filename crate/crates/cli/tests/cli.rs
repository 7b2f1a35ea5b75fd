use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glmm-vb")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &TempDir, name: &str, kind: &str, m: &str, seed: &str) -> PathBuf {
    let p = path(dir, name);
    ok(&["simulate", "--kind", kind, "--m", m, "--seed", seed, "--out", s(&p)]);
    p
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = simulate(&dir, "a.csv", "logistic", "1000", "7");
    let b = simulate(&dir, "b.csv", "logistic", "1000", "7");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let truth = path(&dir, "truth.json");
    ok(&["simulate", "--kind", "poisson", "--m", "10", "--truth", s(&truth), "--out", s(&path(&dir, "p.csv"))]);
    let v: Value = serde_json::from_str(&fs::read_to_string(truth).unwrap()).unwrap();
    assert_eq!(v["true_sigma2"], 0.2);
}

fn trapezoid(grid: &[Value]) -> f64 {
    grid.windows(2)
        .map(|w| {
            let (x0, y0) = (w[0][0].as_f64().unwrap(), w[0][1].as_f64().unwrap());
            let (x1, y1) = (w[1][0].as_f64().unwrap(), w[1][1].as_f64().unwrap());
            0.5 * (x1 - x0) * (y0 + y1)
        })
        .sum()
}

#[test]
fn fit_then_density_grids_integrate_to_one() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", "logistic", "400", "11");
    let fit = path(&dir, "fit.json");
    ok(&["fit", "--data", s(&data), "--family", "bernoulli", "--seed", "3", "--out", s(&fit)]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(doc["combined"], true);
    assert_eq!(doc["pieces"].as_array().unwrap().len(), 2);
    assert_eq!(doc["nu_q"].as_f64().unwrap(), 2.0 + 400.0);

    let out = ok(&["density", "--fit", s(&fit)]);
    let grids: Value = serde_json::from_slice(&out.stdout).unwrap();
    let grids = grids.as_array().unwrap();
    assert_eq!(grids.len(), 3);
    for g in grids {
        let pts = g["grid"].as_array().unwrap();
        assert_eq!(pts.len(), 512);
        let area = trapezoid(pts);
        assert!((area - 1.0).abs() < 1e-3, "{}: {area}", g["parameter"]);
    }
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", "poisson", "300", "12");
    let a = path(&dir, "a.json");
    let b = path(&dir, "b.json");
    ok(&["--jobs", "1", "fit", "--data", s(&data), "--family", "poisson", "--pieces-size", "100", "--seed", "4", "--out", s(&a)]);
    ok(&["--jobs", "4", "fit", "--data", s(&data), "--family", "poisson", "--pieces-size", "100", "--seed", "4", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn recombining_saved_pieces_reproduces_fit() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", "poisson", "200", "13");
    let fit = path(&dir, "fit.json");
    let pieces = path(&dir, "pieces");
    let part = path(&dir, "partition.csv");
    ok(&[
        "fit", "--data", s(&data), "--family", "poisson", "--pieces-size", "100", "--seed", "5",
        "--out", s(&fit), "--pieces-dir", s(&pieces), "--partition", s(&part),
    ]);
    let p0 = pieces.join("piece-0.json");
    let p1 = pieces.join("piece-1.json");
    let again = path(&dir, "again.json");
    ok(&["recombine", s(&p0), s(&p1), "--seed", "5", "--out", s(&again)]);
    let a: Value = serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&fs::read_to_string(&again).unwrap()).unwrap();
    assert_eq!(a["mu_beta"], b["mu_beta"]);
    assert_eq!(a["sigma_beta"], b["sigma_beta"]);
    assert_eq!(a["S_q"], b["S_q"]);
    let header = fs::read_to_string(&part).unwrap();
    assert!(header.starts_with("subject_id,piece"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let out = run(&["fit", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "missing.csv");
    let out = run(&["fit", "--data", s(&missing), "--family", "poisson"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let data = simulate(&dir, "d.csv", "poisson", "20", "1");
    let out = run(&["fit", "--data", s(&data), "--family", "gamma"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["fit", "--data", s(&data), "--family", "poisson", "--inner-N", "99"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["select", "--data", s(&data), "--family", "poisson"]);
    assert_eq!(out.status.code(), Some(1), "a single piece cannot be cross-validated");
}

#[test]
fn select_prints_candidate_table() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", "logistic-select", "150", "14");
    let csv = path(&dir, "report.csv");
    let out = ok(&[
        "select", "--data", s(&data), "--family", "bernoulli", "--fixed-pool", "x2,x3", "--random-pool", "z2",
        "--pieces-size", "50", "--seed", "2", "--out-csv", s(&csv),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("LPDS"));
    let report = fs::read_to_string(&csv).unwrap();
    assert_eq!(report.lines().count(), 1 + 8);
}

#[test]
fn compare_poisson_fit_with_chain() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", "poisson", "50", "15");
    let fit = path(&dir, "fit.json");
    let chain = path(&dir, "chain.csv");
    let summary = path(&dir, "summary.json");
    let report = path(&dir, "compare.json");
    ok(&["fit", "--data", s(&data), "--family", "poisson", "--seed", "6", "--out", s(&fit)]);
    ok(&[
        "mcmc", "--data", s(&data), "--family", "poisson", "--n-iter", "5000", "--burnin", "5000", "--seed", "6",
        "--out", s(&chain), "--summary", s(&summary),
    ]);
    ok(&["compare", "--fit", s(&fit), "--chain", s(&chain), "--out", s(&report)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["comparison"].as_array().unwrap();
    for row in rows.iter().filter(|r| r["parameter"].as_str().unwrap().starts_with("beta")) {
        let d = row["abs_mean_delta"].as_f64().unwrap();
        assert!(d < 0.1, "{}: {d}", row["parameter"]);
    }
    assert_eq!(v["mcmc_density"].as_array().unwrap().len(), 3);
}
