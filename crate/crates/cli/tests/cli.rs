//! End-to-end runs of the `fluxmc` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fluxmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluxmc"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn dir_arg(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn toy2d_writes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluxmc(&["toy2d", "--set", "ensemble.members=20000", "--out", dir_arg(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("toy2d.json")).unwrap()).unwrap();
    assert_eq!(json["members"], 20000);
    let s = json["sigma"][0][0].as_f64().unwrap();
    assert!((s - 2.10838562).abs() < 1e-6);
}

#[test]
fn factors_prints_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluxmc(&["factors", "--out", dir_arg(tmp.path())]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(tmp.path().join("factors.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("M,L,R"));
    assert_eq!(lines.count(), 6);
    assert!(stdout(&out).contains("1000000"));
}

#[test]
fn synthetic_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, workers: &str| {
        fluxmc(&["synthetic", "--seed", "5", "--workers", workers, "--out", dir_arg(dir)])
    };
    assert_eq!(code(&run(a.path(), "1")), 0);
    assert_eq!(code(&run(b.path(), "4")), 0);
    for name in ["ensemble.ens", "central_map.csv", "reports.json", "timeseries.csv", "summary.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn ensemble_run_info_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = dir_arg(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"problem": {"operator": "synthetic", "m": 8, "n": 20}, "ensemble": {"members": 40}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = fluxmc(&["ensemble", "run", "--config", cfg, "--out", dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ens = tmp.path().join("ensemble.ens");
    assert!(ens.exists() && tmp.path().join("ensemble_summary.json").exists());

    let info = fluxmc(&["ensemble", "info", ens.to_str().unwrap()]);
    assert_eq!(code(&info), 0);
    let text = stdout(&info);
    assert!(text.contains("format version 1") && text.contains("\"members\": 40"), "{text}");

    let report_dir = tmp.path().join("report");
    let rep = fluxmc(&["report", ens.to_str().unwrap(), "--config", cfg, "--out", report_dir.to_str().unwrap()]);
    assert_eq!(code(&rep), 0, "{}", String::from_utf8_lossy(&rep.stderr));
    assert!(report_dir.join("report.json").exists() && report_dir.join("report.csv").exists());
}

#[test]
fn coverage_small_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluxmc(&[
        "coverage",
        "--set",
        "coverage.replicates=500",
        "--set",
        "coverage.ks_replicates=200",
        "--out",
        dir_arg(tmp.path()),
    ]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("coverage.json")).unwrap()).unwrap();
    assert_eq!(json["replicates"], 500);
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = dir_arg(tmp.path());
    assert_eq!(code(&fluxmc(&["toy2d", "--set", "nosuch.key=1", "--out", dir])), 1);
    assert_eq!(code(&fluxmc(&["toy2d", "--set", "ensemble.members=1", "--out", dir])), 1);
    assert_eq!(code(&fluxmc(&["toy2d", "--config", "/nonexistent/cfg.json", "--out", dir])), 1);
    assert_eq!(code(&fluxmc(&["toy2d", "--no-such-flag"])), 1);
    assert_eq!(code(&fluxmc(&["ensemble", "info", "/nonexistent.ens"])), 1);
    let garbage = tmp.path().join("bad.ens");
    fs::write(&garbage, b"not an ensemble").unwrap();
    assert_eq!(code(&fluxmc(&["report", garbage.to_str().unwrap(), "--out", dir])), 1);
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluxmc(&[
        "toy2d",
        "--set",
        "control.mu=[1e200,1e200]",
        "--set",
        "ensemble.members=10",
        "--out",
        dir_arg(tmp.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_convergence_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluxmc(&["synthetic", "--set", "lbfgs.max_iter=1", "--out", dir_arg(tmp.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("converge"));
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_fluxmc")).arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for sub in ["toy2d", "factors", "synthetic", "coverage", "ensemble", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
