//! End-to-end checks through the `mfp` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use mfp_cli::run::read_summary;

fn mfp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfp"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn value(dir: &Path, key: &str) -> f64 {
    let kv = read_summary(&dir.join("summary.kv")).unwrap();
    kv.into_iter().find(|(k, _)| k == key).unwrap().1.parse().unwrap()
}

#[test]
fn benchmark_run_matches_first_table_row() {
    let out = tempfile::tempdir().unwrap();
    let run = mfp()
        .args(["run", "--config"])
        .arg(configs().join("ot1d.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("W₂²"));
    // Published figures for Δ = (1/16, 1/64).
    for (key, published) in [("error_l2", 3.19e-4), ("error_max", 2.88e-3), ("w2sq_error", 4.88e-6)] {
        let got = value(out.path(), key);
        assert!((got - published).abs() <= 0.25 * published, "{key}: {got} vs {published}");
    }
    for name in ["diagnostics.csv", "timing.csv", "summary.txt", "density.pgm", "snapshot_04.csv"] {
        assert!(out.path().join(name).exists(), "{name}");
    }
}

/// Mass-weighted mean distance from `(cx, cy)` over a 2D snapshot CSV.
fn mean_distance(path: &Path, cx: f64, cy: f64) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        num += v[2] * ((v[0] - cx).powi(2) + (v[1] - cy).powi(2)).sqrt();
        den += v[2];
    }
    num / den
}

#[test]
fn game_run_moves_mass_toward_the_basin() {
    let out = tempfile::tempdir().unwrap();
    let run = mfp()
        .args(["run", "--config"])
        .arg(configs().join("game.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(value(out.path(), "stationarity") < 1e-5);
    assert!(value(out.path(), "min_density") > 0.0);
    let start = mean_distance(&out.path().join("snapshot_00.csv"), 0.75, 0.5);
    let end = mean_distance(&out.path().join("snapshot_04.csv"), 0.75, 0.5);
    assert!(end < start - 0.02, "{start} -> {end}");
}

#[test]
fn config_errors_exit_nonzero_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "[problem]\nshape = [4, 8]\nrho0 = { type = \"uniform\" }\nrho1 = { type = \"uniform\" }\n\n[solver]\nvariant = \"mgfista\"\nlevels = 1\n",
    )
    .unwrap();
    let out = mfp().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 8"), "{stderr}");
}

#[test]
fn divergence_exits_nonzero_and_keeps_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hot.toml");
    std::fs::write(
        &path,
        "[problem]\nshape = [8, 16]\n\
         rho0 = { type = \"gaussian\", blobs = [{ center = [0.2], sigma = 0.03 }] }\n\
         rho1 = { type = \"gaussian\", blobs = [{ center = [0.8], sigma = 0.03 }] }\n\
         [solver]\neta = 50.0\nmax_iters = 500\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = mfp().args(["run", "--config"]).arg(&path).arg("--out").arg(&out_dir).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(std::fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap().lines().count() > 1);
}

#[test]
fn bench_and_study_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.toml");
    std::fs::write(
        &path,
        "[problem]\nshape = [8, 32]\nrho0 = { type = \"ot1d-exact\", time = 0.0 }\nrho1 = { type = \"ot1d-exact\", time = 1.0 }\n\
         [solver]\neta = 0.4\ntol = 1e-8\nlevels = 2\n[study]\ngrids = [[4, 16], [8, 32]]\n",
    )
    .unwrap();
    let out = mfp()
        .args(["bench", "--variants", "fista,mgfista(2)", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("mgfista(2)"));

    let out = mfp()
        .args(["convergence-study", "--threads", "2", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| 1/8 | 1/32 |"));
}

#[test]
fn study_rejects_two_dimensional_configs() {
    let out = mfp()
        .args(["convergence-study", "--config"])
        .arg(configs().join("obstacle.toml"))
        .arg("--out")
        .arg(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
