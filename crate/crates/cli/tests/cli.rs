use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn wcub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wcub"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_without_column(path: &Path, column: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let skip = header.iter().position(|h| *h == column).unwrap();
    text.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, f)| f.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn formula_degree3_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = wcub(&["formula", "--degree", "3", "--dim", "1", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&dir.path().join("verification.json"));
    assert!(report["max_defect"].as_f64().unwrap() <= 1e-12);
    assert!(report["passed"].as_bool().unwrap());
    assert!(dir.path().join("formula.json").exists());
    assert!(dir.path().join("formula.manifest.json").exists());
}

#[test]
fn formula_degree5_has_three_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "formula",
        "--degree",
        "5",
        "--dim",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&dir.path().join("verification.json"))["paths"], 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("paths: 3"));
}

#[test]
fn even_degree_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "formula",
        "--degree",
        "4",
        "--dim",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("odd"));
}

#[test]
fn failed_verification_names_the_word() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "formula",
        "--degree",
        "3",
        "--verify-degree",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("failed word (1,1,1,1)"));
}

#[test]
fn unknown_flag_and_bad_config_exit_2() {
    assert_eq!(code(&wcub(&["formula", "--no-such-flag"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"partition": {"k": "ten"}}"#).unwrap();
    assert_eq!(
        code(&wcub(&["preprocess", "--config", cfg.to_str().unwrap()])),
        2
    );
}

#[test]
fn preprocess_k10_is_fast_and_prunes() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Instant::now();
    let o = wcub(&[
        "preprocess",
        "--degree",
        "5",
        "--dim",
        "1",
        "--k",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(clock.elapsed().as_secs_f64() <= 10.0);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("interval 10:"));
    let m = json(&dir.path().join("preprocess.manifest.json"));
    assert_eq!(m["results"]["survivors"].as_array().unwrap().len(), 10);
    assert!(m["results"]["leaves"].as_u64().unwrap() < 3u64.pow(10));
}

#[test]
fn preprocess_k2_keeps_raw_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "preprocess",
        "--k",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let table = json(&dir.path().join("table.json"));
    let leaves = table["intervals"][1].as_array().unwrap();
    assert_eq!(leaves.len(), 9);
    let lam = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
    for e in leaves {
        let code = e[0].as_u64().unwrap() as usize;
        let w = e[1].as_f64().unwrap();
        assert!((w - lam[code / 3] * lam[code % 3]).abs() < 1e-15);
    }
}

#[test]
fn preprocess_missing_formula_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = wcub(&[
        "preprocess",
        "--formula",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn preprocess_reads_formula_written_by_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&wcub(&["formula", "--degree", "5", "--out", out])), 0);
    let f = dir.path().join("formula.json");
    assert_eq!(
        code(&wcub(&[
            "preprocess",
            "--formula",
            f.to_str().unwrap(),
            "--k",
            "4",
            "--out",
            out
        ])),
        0
    );
}

fn estimate_values(dir: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(dir.join("estimate.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn deterministic_problem_arms_agree() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "estimate",
        "--problem",
        "decay_sine",
        "--k",
        "4",
        "--mc-paths",
        "3",
        "--mc-steps",
        "2000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = estimate_values(dir.path());
    assert_eq!(v.len(), 2);
    assert!((v[0].1 - v[1].1).abs() < 1e-3, "{v:?}");
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, w) in [(&a, "1"), (&b, "3")] {
        let o = wcub(&[
            "--workers",
            w,
            "estimate",
            "--k",
            "5",
            "--mc-paths",
            "200",
            "--mc-steps",
            "50",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(estimate_values(a.path()), estimate_values(b.path()));
}

#[test]
fn bench_writes_both_methods_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "bench",
        "--ks",
        "2,3,4",
        "--mc-ns",
        "100,300",
        "--replicates",
        "3",
        "--mc-steps",
        "50",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("method,n,error,seconds\n"));
    assert!(csv.lines().any(|l| l.starts_with("cubature,")));
    assert!(csv.lines().any(|l| l.starts_with("mc,")));
    let m = json(&dir.path().join("bench.manifest.json"));
    assert!(m["results"]["mc_slope"].as_f64().is_some());
    assert!(m["results"]["cubature_slope"].as_f64().is_some());
}

#[test]
fn train_smoke_run_and_rerun_from_manifest() {
    let first = tempfile::tempdir().unwrap();
    let o = wcub(&[
        "train",
        "--epochs",
        "5",
        "--dim",
        "1",
        "--out",
        first.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(first.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 10);
    assert_eq!(log.lines().filter(|l| l.contains(",cubature,")).count(), 5);
    assert_eq!(log.lines().filter(|l| l.contains(",mc,")).count(), 5);
    for f in [
        "data.csv",
        "params_initial.json",
        "params_cubature.json",
        "params_mc.json",
        "train.manifest.json",
    ] {
        assert!(first.path().join(f).exists(), "{f}");
    }

    let second = tempfile::tempdir().unwrap();
    let manifest = first.path().join("train.manifest.json");
    let o = wcub(&[
        "train",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        second.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        csv_without_column(&first.path().join("train_log.csv"), "seconds"),
        csv_without_column(&second.path().join("train_log.csv"), "seconds")
    );
    assert_eq!(
        fs::read(first.path().join("params_cubature.json")).unwrap(),
        fs::read(second.path().join("params_cubature.json")).unwrap()
    );
    assert_eq!(
        fs::read(first.path().join("data.csv")).unwrap(),
        fs::read(second.path().join("data.csv")).unwrap()
    );
}

#[test]
fn preprocess_rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&wcub(&[
            "preprocess",
            "--k",
            "6",
            "--out",
            a.path().to_str().unwrap()
        ])),
        0
    );
    let m = a.path().join("preprocess.manifest.json");
    assert_eq!(
        code(&wcub(&[
            "preprocess",
            "--config",
            m.to_str().unwrap(),
            "--out",
            b.path().to_str().unwrap()
        ])),
        0
    );
    let strip = |p: &Path| {
        let mut v = json(p);
        v["manifest"]["seconds"] = Value::Null;
        v
    };
    assert_eq!(
        strip(&a.path().join("table.json")),
        strip(&b.path().join("table.json"))
    );
}
