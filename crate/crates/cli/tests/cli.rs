use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn walkdiff(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_walkdiff"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .env_remove("WALKDIFF_THREADS")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "stdout must be a single line: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn classify_gbm_reports_case_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = walkdiff(&["classify", "--model", "gbm", "--m", "1", "--mu", "rademacher"], dir.path());
    assert!(out.status.success());
    let s = summary(&out);
    assert_eq!(s["case_id"], 2);
    assert_eq!(s["status"], "ok");
    // No seed given: one is generated and reported.
    assert_eq!(s["seed_generated"], true);
    assert!(s["seed"].is_u64());
}

#[test]
fn scalefactor_bm_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = walkdiff(&["scalefactor", "--model", "bm", "--N", "100", "--grid", "-2:2:9"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("y,a_N,G,exact_equality"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let a: f64 = r[1].parse().unwrap();
        assert!((a - 0.1).abs() < 1e-10, "{a}");
        assert_eq!(r[3], "true");
    }
}

#[test]
fn walk_with_no_steps_writes_the_start_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = walkdiff(&["walk", "--model", "bm", "--m", "0.25", "--N", "100", "--steps", "0", "--seed", "1"], dir.path());
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert_eq!(csv, "path_id,k,y\n0,0,0.25\n");
}

#[test]
fn embed_writes_taus_and_durations() {
    let dir = tempfile::tempdir().unwrap();
    let out = walkdiff(
        &[
            "embed", "--model", "absorbed_bm", "--m", "0.05", "--N", "100", "--steps", "5", "--paths", "3", "--seed", "2",
            "--grid-nodes", "64",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("embedded.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3 * 6);
    for r in rows.windows(2).filter(|w| w[0][0] == w[1][0]) {
        // tau increases by xi + wait.
        assert!((r[1][2] - r[0][2] - r[1][4] - r[1][5]).abs() < 1e-12);
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 9

[model]
name = "absorbed_bm"
m = 0.5

[command.scalefactor]
N = 4
grid = "0.01,0.05,0.2"

[output]
path = "abm.csv"
"#,
    )
    .unwrap();
    let out = walkdiff(&["scalefactor", "--config", cfg.to_str().unwrap(), "--N", "100"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let s = summary(&out);
    assert_eq!((s["N"].as_u64(), s["seed"].as_u64()), (Some(100), Some(9)));
    let csv = std::fs::read_to_string(dir.path().join("abm.csv")).unwrap();
    let a: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    for (got, want) in a.iter().zip([0.01, 0.05, 0.1]) {
        assert!((got - want).abs() < 1e-10);
    }

    let out = walkdiff(&["walk", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(summary(&out)["code"], "usage_error");
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nname = \"bm\"\nm = 0.0\ndriftt = 1.0\n[command.classify]\n").unwrap();
    let out = walkdiff(&["classify", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let s = summary(&out);
    assert_eq!(s["code"], "parse_error");
    assert!(s["message"].as_str().unwrap().contains("driftt"));

    let out = walkdiff(&["classify", "--model", "bm", "--mu", "uniform{half_width=0}"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // A grid point outside the state space is a domain error; nothing is written.
    let out = walkdiff(&["scalefactor", "--model", "gbm", "--N", "10", "--grid", "0.5,-1"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(summary(&out)["status"], "error");
    assert!(!dir.path().join("table.csv").exists());
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1, "only the config should remain");
}

#[test]
fn convergence_reports_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = walkdiff(
        &[
            "lln", "--model", "bm", "--array", "exponential", "--n-values", "10,1000", "--epsilon", "0.2", "--reps", "300",
            "--seed", "4", "--threshold", "0.05",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for key in ["experiment_id", "config", "metric", "values", "pass"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["values"][1]["N"], 1000);
    assert_eq!(report["pass"], true);
    assert_eq!(report["config"]["seed"], 4);
    assert!(report["config"].get("output").is_none());

    let out = walkdiff(
        &[
            "converge", "--model", "bm", "--experiment", "marginal", "--N-values", "4,64", "--samples", "500", "--seed", "5",
            "--samples-csv", "raw.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let raw = std::fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 500);
}

#[test]
fn thread_count_does_not_change_results() {
    let args = [
        "walk", "--model", "gbm", "--m", "1", "--N", "50", "--steps", "50", "--paths", "40", "--seed", "8",
    ];
    let (d1, d4) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut a1 = args.to_vec();
    a1.extend(["--threads", "1"]);
    let mut a4 = args.to_vec();
    a4.extend(["--threads", "4"]);
    assert!(walkdiff(&a1, d1.path()).status.success());
    assert!(walkdiff(&a4, d4.path()).status.success());
    assert_eq!(
        std::fs::read(d1.path().join("paths.csv")).unwrap(),
        std::fs::read(d4.path().join("paths.csv")).unwrap()
    );
}
