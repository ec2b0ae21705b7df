//! The `psar` binary end to end: round trips and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn psar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psar")).args(args).output().expect("spawn psar")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let (data, edges) = (dir.join("data.csv"), dir.join("edges.csv"));
    let out = psar(&["simulate", "--n", "300", "--seed", seed, "--out-data", s(&data), "--out-edges", s(&edges)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data, edges)
}

#[test]
fn simulate_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, edges) = simulate(dir.path(), "5");
    let header = std::fs::read_to_string(&data).unwrap();
    assert!(header.starts_with("node_id,y,x1,x2"), "{}", &header[..40.min(header.len())]);
    for est in ["qmle", "cle", "cls"] {
        let out = psar(&[
            "fit", "--data", s(&data), "--edges", s(&edges), "--estimator", est,
            "--lambda2", "0.5", "--lambda2-x", "0.5", "--protected-cols", "1", "--bootstrap", "20",
        ]);
        assert_eq!(code(&out), 0, "{est}: {}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["converged"].as_bool().unwrap(), "{est}");
        let rho = v["point"]["rho"].as_f64().unwrap();
        assert!(rho.abs() < 1.0, "{est}: rho {rho}");
        assert!(v["se"].as_array().is_some_and(|a| !a.is_empty()), "{est}: {v}");
    }
}

#[test]
fn bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, edges) = simulate(dir.path(), "6");
    let missing = dir.path().join("nope.csv");
    let cases: Vec<Vec<&str>> = vec![
        vec!["fit", "--data", s(&missing), "--edges", s(&edges)],
        vec!["fit", "--data", s(&data), "--edges", s(&edges), "--estimator", "gmm"],
        vec!["fit", "--data", s(&data), "--edges", s(&edges), "--protected-cols", "9"],
        vec!["fit", "--data", s(&data), "--edges", s(&edges), "--lambda2", "-1"],
        vec!["simulate", "--generator", "ring", "--out-data", s(&missing), "--out-edges", s(&missing)],
        vec!["simulate", "--n", "5", "--out-data", s(&missing), "--out-edges", s(&missing)],
    ];
    for args in cases {
        let out = psar(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "n = 100\nestimators = cle,banana\n").unwrap();
    assert_eq!(code(&psar(&["mc", s(&cfg)])), 2);
    // Argument errors from the parser also use 2.
    assert_eq!(code(&psar(&["fit"])), 2);
}

#[test]
fn zero_out_degree_is_input_error_unless_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let (data, edges) = (dir.path().join("d.csv"), dir.path().join("e.csv"));
    let mut rows = String::from("node_id,y,x1\n");
    for i in 0..6 {
        rows += &format!("{i},{},{}\n", 0.3 * i as f64 - 0.5, (i * i % 5) as f64 - 2.0);
    }
    std::fs::write(&data, rows).unwrap();
    // Node 5 has no out-edges.
    std::fs::write(&edges, "src,dst\n0,1\n1,2\n2,0\n3,4\n4,3\n0,5\n").unwrap();
    let base = ["fit", "--data", s(&data), "--edges", s(&edges), "--estimator", "qmle"];
    let out = psar(&base);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let mut dropped = base.to_vec();
    dropped.push("--drop-isolated");
    let out = psar(&dropped);
    assert_ne!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropped 1"));
}

#[test]
fn estimation_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (data, edges) = simulate(dir.path(), "7");
    // Duplicate the covariate column: X'X becomes singular.
    let text = std::fs::read_to_string(&data).unwrap();
    let dup: String = text
        .lines()
        .map(|l| {
            let last = l.rsplit(',').next().unwrap();
            let last = if last == "x2" { "x3" } else { last };
            format!("{l},{last}\n")
        })
        .collect();
    std::fs::write(&data, dup).unwrap();
    for est in ["qmle", "cls"] {
        let out = psar(&["fit", "--data", s(&data), "--edges", s(&edges), "--estimator", est]);
        assert_eq!(code(&out), 3, "{est}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn mc_output_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.cfg");
    std::fs::write(&cfg, "n = 200\nreplicates = 6\nestimators = qmle,cls\nbootstrap_b = 10\nseed = 4\n").unwrap();
    let run = |w: &str| {
        let raw = dir.path().join(format!("raw{w}.csv"));
        let out = psar(&["mc", s(&cfg), "--workers", w, "--raw", s(&raw)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        // The summary's last column is wall-clock time; everything else must match.
        let summary: Vec<String> = String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect();
        (summary, std::fs::read_to_string(raw).unwrap())
    };
    let one = run("1");
    assert!(one.1.lines().count() > 1);
    let three = run("3");
    assert_eq!(one.0, three.0);
    assert!(one.1 == three.1, "raw tables differ across worker counts");
}
