//! End-to-end tests of the `faircal` binary: the synth → run → report
//! workflow, exit codes, and output determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn faircal() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_faircal"));
    cmd.env_remove("FAIRCAL_THREADS");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn faircal");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    let out = cmd.output().expect("spawn faircal");
    out.status.code().expect("no exit code")
}

/// Generates a small two-subgroup dataset and returns its file paths.
fn synth_small(dir: &Path) -> (PathBuf, PathBuf) {
    let pairs = dir.join("pairs.csv");
    let emb = dir.join("emb.fce");
    run_ok(
        faircal()
            .args([
                "synth",
                "--subgroup",
                "lo:0.10:20:6",
                "--subgroup",
                "hi:0.30:20:6",
            ])
            .args(["--dim", "16", "--folds", "2", "--seed", "9"])
            .args([
                "--genuine-pairs-per-id",
                "6",
                "--imposter-pairs-per-id",
                "6",
            ])
            .arg("--out-pairs")
            .arg(&pairs)
            .arg("--out-emb")
            .arg(&emb),
    );
    (pairs, emb)
}

fn run_report(pairs: &Path, emb: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = faircal();
    cmd.arg("run")
        .arg("--pairs")
        .arg(pairs)
        .arg("--embeddings")
        .arg(emb)
        .args(["--methods", "baseline,faircal", "--calibrator", "beta"])
        .args(["--clusters", "4", "--folds", "2", "--fpr", "0.05"])
        .args(["--attributes", "subgroup", "--seed", "42"])
        .arg("--out")
        .arg(out)
        .args(extra);
    run_ok(&mut cmd)
}

#[test]
fn synth_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let report = dir.path().join("report.json");
    run_report(&pairs, &emb, &report, &[]);

    let out = run_ok(
        faircal()
            .arg("report")
            .arg("--in")
            .arg(&report)
            .args(["--table", "accuracy", "--format", "csv"]),
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("# table: accuracy\nmetric,method,subgroup,mean,std\n"));
    assert!(table.contains("auroc,baseline,"));
    assert!(table.contains("auroc,faircal,"));
    assert!(table.contains("tpr@0.05,baseline,"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    run_report(&pairs, &emb, &a, &[]);
    run_report(&pairs, &emb, &b, &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn csv_format_emits_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let report = dir.path().join("report.csv");
    run_report(&pairs, &emb, &report, &["--format", "csv"]);
    let text = std::fs::read_to_string(&report).unwrap();
    for table in ["accuracy", "ks", "fpr-dev", "fnr-dev", "fpr-curve"] {
        assert!(
            text.contains(&format!("# table: {table}\n")),
            "missing {table}"
        );
    }
}

#[test]
fn spec_file_drives_synth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bench.spec");
    std::fs::write(
        &spec,
        "# two uneven subgroups\n\
         dim = 16\n\
         folds = 2\n\
         genuine_pairs_per_id = 4\n\
         imposter_pairs_per_id = 4\n\
         subgroup = lo:0.10:12:4\n\
         subgroup = hi:0.30:12:4\n",
    )
    .unwrap();
    let pairs = dir.path().join("pairs.csv");
    let emb = dir.path().join("emb.fce");
    run_ok(
        faircal()
            .arg("synth")
            .arg("--spec")
            .arg(&spec)
            .args(["--seed", "5"])
            .arg("--out-pairs")
            .arg(&pairs)
            .arg("--out-emb")
            .arg(&emb),
    );
    let manifest = std::fs::read_to_string(&pairs).unwrap();
    assert!(manifest.starts_with("id1,id2,label,fold,attr:subgroup1,attr:subgroup2"));
    // 12 identities × (4 + 4) pairs × 2 subgroups.
    assert_eq!(manifest.lines().count() - 1, 192);
}

#[test]
fn missing_attributes_for_oracle_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let code = exit_code(
        faircal()
            .arg("run")
            .arg("--pairs")
            .arg(&pairs)
            .arg("--embeddings")
            .arg(&emb)
            .args(["--methods", "oracle", "--folds", "2"])
            .arg("--out")
            .arg(dir.path().join("r.json")),
    );
    assert_eq!(code, 2);
}

#[test]
fn malformed_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, emb) = synth_small(dir.path());
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id1,id2,label,fold\na,b,7,0\n").unwrap();
    let code = exit_code(
        faircal()
            .arg("run")
            .arg("--pairs")
            .arg(&bad)
            .arg("--embeddings")
            .arg(&emb)
            .args(["--methods", "baseline", "--folds", "2"])
            .arg("--out")
            .arg(dir.path().join("r.json")),
    );
    assert_eq!(code, 3);
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, emb) = synth_small(dir.path());
    let code = exit_code(
        faircal()
            .arg("run")
            .arg("--pairs")
            .arg(dir.path().join("absent.csv"))
            .arg("--embeddings")
            .arg(&emb)
            .args(["--methods", "baseline", "--folds", "2"])
            .arg("--out")
            .arg(dir.path().join("r.json")),
    );
    assert_eq!(code, 5);
}

#[test]
fn unfittable_method_exits_4_but_still_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let report = dir.path().join("report.json");
    let out = faircal()
        .arg("run")
        .arg("--pairs")
        .arg(&pairs)
        .arg("--embeddings")
        .arg(&emb)
        .args(["--methods", "baseline,faircal", "--clusters", "100000"])
        .args(["--folds", "2", "--fpr", "0.05", "--seed", "42"])
        .arg("--out")
        .arg(&report)
        .output()
        .expect("spawn faircal");
    assert_eq!(out.status.code(), Some(4));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"errors\""));
    // Baseline is unaffected by the impossible cluster count.
    assert!(text.contains("auroc"));
}

#[test]
fn invalid_thread_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, emb) = synth_small(dir.path());
    let mut cmd = faircal();
    cmd.env("FAIRCAL_THREADS", "lots");
    cmd.arg("run")
        .arg("--pairs")
        .arg(&pairs)
        .arg("--embeddings")
        .arg(&emb)
        .args(["--methods", "baseline", "--folds", "2"])
        .arg("--out")
        .arg(dir.path().join("r.json"));
    assert_eq!(exit_code(&mut cmd), 2);
}

#[test]
fn unknown_method_is_rejected_by_the_parser() {
    let code = exit_code(faircal().args([
        "run",
        "--pairs",
        "p.csv",
        "--embeddings",
        "e.fce",
        "--methods",
        "quantum",
        "--out",
        "r.json",
    ]));
    assert_eq!(code, 2);
}
