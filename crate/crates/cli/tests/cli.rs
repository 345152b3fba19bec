use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tdoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdoa")).args(args).output().unwrap()
}

fn scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/office.toml")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Simulates the office scenario into a temp dir.
fn simulated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = tdoa(&["--seed", "7", "simulate", p(&scenario()), "-o", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn simulate_locate_eval_pipeline() {
    let dir = simulated();
    for f in ["observations.txt", "truth.txt", "testbed.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let fixes = dir.path().join("fixes.txt");
    let obs = dir.path().join("observations.txt");
    let cfg = dir.path().join("testbed.toml");
    let out = tdoa(&["locate", p(&obs), p(&cfg), "--variant", "consec-robust", "-o", p(&fixes)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&fixes).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("FIX ")).count() > 100);

    let out = tdoa(&["eval", p(&fixes), p(&dir.path().join("truth.txt"))]);
    assert!(out.status.success());
    let report = stdout(&out);
    let mean: f64 = report.lines().find_map(|l| l.strip_prefix("mean ")).unwrap().parse().unwrap();
    assert!(mean < 0.2, "mean {mean}");
    assert!(report.contains("average_bias "));
}

#[test]
fn simulate_is_reproducible() {
    let a = simulated();
    let b = simulated();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("observations.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn ablate_prints_one_row_per_subset() {
    let dir = simulated();
    let subsets = dir.path().join("subsets.txt");
    std::fs::write(&subsets, "1 2 3 4 5 6 7 8\n2 4 6 8\n").unwrap();
    let out = tdoa(&[
        "ablate",
        p(&dir.path().join("observations.txt")),
        p(&dir.path().join("testbed.toml")),
        "--subsets",
        p(&subsets),
        "--truth",
        p(&dir.path().join("truth.txt")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = stdout(&out).lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
    assert_eq!(rows.len(), 2);
}

#[test]
fn missing_file_fails_with_one_line() {
    let out = tdoa(&["locate", "/nonexistent/obs.txt", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn malformed_observations_are_reported() {
    let dir = simulated();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "anchor 1 hears 2 seq 0 ts 1.0\nnot a record\n").unwrap();
    let out = tdoa(&["locate", p(&bad), p(&dir.path().join("testbed.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
}

#[test]
fn unknown_variant_is_rejected() {
    let dir = simulated();
    let out = tdoa(&[
        "locate",
        p(&dir.path().join("observations.txt")),
        p(&dir.path().join("testbed.toml")),
        "--variant",
        "fastest",
    ]);
    assert!(!out.status.success());
}
