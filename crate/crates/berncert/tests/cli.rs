//! End-to-end runs of the installed binary: exit codes first, then one
//! pass through every subcommand on a small synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

fn berncert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_berncert"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn berncert")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = berncert(dir, args);
    assert!(
        out.status.success(),
        "berncert {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

#[test]
fn bad_arguments_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = berncert(dir.path(), &["no-such-command"]);
    assert_eq!(code(&unknown), 2);
    let missing = berncert(dir.path(), &["certify"]);
    assert_eq!(code(&missing), 2);
    let bad_value = berncert(
        dir.path(),
        &["synth", "two-moons", "--out", "d.csv", "--samples", "many"],
    );
    assert_eq!(code(&bad_value), 2);
}

#[test]
fn missing_files_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = berncert(
        dir.path(),
        &["certify", "absent.json", "absent.csv", "--out", "r.csv"],
    );
    assert_eq!(
        code(&out),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn infeasible_certification_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "two-moons",
            "--out",
            "d.csv",
            "--samples",
            "40",
            "--seed",
            "5",
        ],
    );
    // Three features over two classes leaves the boundary system with
    // more unknowns than residuals can pin down.
    ok(
        dir.path(),
        &[
            "train",
            "d.csv",
            "--out",
            "m.json",
            "--epochs",
            "5",
            "--feature-dim",
            "3",
            "--seed",
            "5",
        ],
    );
    let out = berncert(
        dir.path(),
        &[
            "certify", "m.json", "d.csv", "--out", "r.csv", "--seed", "5",
        ],
    );
    assert_eq!(
        code(&out),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "two-moons",
            "--out",
            "moons.csv",
            "--samples",
            "60",
            "--noise",
            "0.08",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "train",
            "moons.csv",
            "--out",
            "model.json",
            "--epochs",
            "200",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "certify",
            "model.json",
            "moons.csv",
            "--out",
            "results.csv",
            "--n",
            "2",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "curve",
            "results.csv",
            "--out",
            "curve.csv",
            "--radii",
            "0.01,0.05,0.1",
        ],
    );
    ok(
        d,
        &[
            "attack",
            "model.json",
            "moons.csv",
            "--out",
            "attack.csv",
            "--eps",
            "0.1",
            "--steps",
            "5",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "demo2d",
            "model.json",
            "--out-dir",
            "demo",
            "--grid",
            "16",
            "--n",
            "1,4",
            "--samples",
            "4",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "synth",
            "sine",
            "--out",
            "sine.csv",
            "--samples",
            "48",
            "--noise",
            "0.1",
            "--seed",
            "11",
        ],
    );
    ok(
        d,
        &[
            "regress",
            "sine.csv",
            "--out",
            "regress.csv",
            "--epochs",
            "300",
            "--grid",
            "64",
            "--seed",
            "11",
        ],
    );

    let results = std::fs::read_to_string(d.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next(),
        Some("index,label,prediction,radius,p,residual,converged,xi,c")
    );
    assert_eq!(lines.count(), 60, "one result row per dataset row");

    for artifact in [
        "model.json",
        "model.metrics.json",
        "curve.csv",
        "attack.csv",
        "attack.summary.json",
        "demo/grids.csv",
        "demo/radii.csv",
        "demo/summary.json",
        "regress.csv",
        "regress.summary.json",
    ] {
        let meta = std::fs::metadata(d.join(artifact))
            .unwrap_or_else(|_| panic!("missing artifact {artifact}"));
        assert!(meta.len() > 0, "{artifact} is empty");
    }
}
