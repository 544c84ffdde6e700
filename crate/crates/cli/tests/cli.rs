//! End-to-end runs of the `actembed` binary.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn actembed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actembed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = actembed(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL_TRAIN: [&str; 10] = [
    "--hidden",
    "8",
    "--embedding-dim",
    "2",
    "--max-epochs",
    "5",
    "--batch-size",
    "16",
    "--pairs-per-epoch",
    "100",
];

/// Synthetic streams plus prepared artifacts in a fresh directory.
fn workspace(separation: &str, noise: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "synth", "--out", "data", "--seed", "1", "--classes", "3", "--subjects", "2", "--seconds", "60",
            "--rate", "10", "--separation", separation, "--noise", noise, "--noise-channels", "1",
        ],
        d,
    );
    let mut args = vec!["prepare", "--out", "prep", "--schema", "data/schema.toml"];
    let streams = ["data/subject0.csv", "data/subject1.csv"];
    args.extend(streams);
    ok(&args, d);
    dir
}

fn train(d: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--prepared", "prep", "--out", out];
    args.extend(SMALL_TRAIN);
    args.extend(extra);
    ok(&args, d)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn eval_json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout).expect("evaluate prints JSON")
}

#[test]
fn full_pipeline_runs_and_reports_accuracy() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--seed", "7", "--budget", "0.10"]);
    for f in ["config.toml", "pairs.csv", "stage1.ckpt", "stage2.ckpt", "metrics.jsonl", "lr_trace.csv"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    assert!(!d.join("run/state.json").exists());

    let out = ok(
        &["evaluate", "--checkpoint", "run/stage2.ckpt", "--prepared", "prep", "--export-embeddings", "emb.csv"],
        d,
    );
    let report = eval_json(&out);
    let acc = report["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(read(d.join("run/eval.json")), out.as_bytes());

    let emb = String::from_utf8(read(d.join("emb.csv"))).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next().unwrap(), "segment_index,e0,e1,label");
    assert_eq!(lines.count() as u64, report["evaluated"].as_u64().unwrap());
}

#[test]
fn manifest_lists_every_artifact_with_input_digests() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--seed", "7", "--budget", "0.10"]);
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("run/manifest.json"))).unwrap();
    let mut listed: Vec<String> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut on_disk: Vec<String> = std::fs::read_dir(d.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["stage2_complete"], true);
    for input in m["inputs"].as_array().unwrap() {
        assert_eq!(input["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn prepare_is_deterministic() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    ok(
        &["prepare", "--out", "again", "--schema", "data/schema.toml", "data/subject0.csv", "data/subject1.csv"],
        d,
    );
    for f in ["segments.csv", "features.csv", "norm.json", "neighbors.csv", "prepare.json"] {
        assert_eq!(read(d.join("prep").join(f)), read(d.join("again").join(f)), "{f} differs");
    }
}

#[test]
fn budgeted_run_writes_pairs_and_stage2_checkpoint() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--budget", "0.10", "--seed", "7"]);
    let pairs = String::from_utf8(read(d.join("run/pairs.csv"))).unwrap();
    assert!(pairs.lines().count() > 1);
    assert!(d.join("run/stage2.ckpt").is_file());

    // the pairs command draws the same set
    ok(&["pairs", "--prepared", "prep", "--budget", "0.10", "--seed", "7", "--pairs-per-epoch", "100", "--out", "p.csv"], d);
    assert_eq!(read(d.join("p.csv")), pairs.as_bytes());
}

#[test]
fn plain_autoencoder_stops_after_stage_one() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--alpha", "0", "--beta", "0", "--stage1-only", "--seed", "3"]);
    assert!(d.join("run/stage1.ckpt").is_file());
    assert!(!d.join("run/stage2.ckpt").exists());
    assert!(!d.join("run/pairs.csv").exists());
    let cfg = String::from_utf8(read(d.join("run/config.toml"))).unwrap();
    let cfg: toml::Table = cfg.parse().unwrap();
    assert_eq!(cfg["stage1"]["alpha"].as_float(), Some(0.0));
    assert_eq!(cfg["stage1"]["beta"].as_float(), Some(0.0));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    let common = ["--seed", "7", "--budget", "0.10"];
    train(d, "whole", &common);

    let mut paused = common.to_vec();
    paused.extend(["--epoch-limit", "3"]);
    assert!(train(d, "split", &paused).contains("paused"));
    assert!(d.join("split/state.json").is_file());
    let mut more = paused.clone();
    more.push("--resume");
    train(d, "split", &more);
    let mut rest = common.to_vec();
    rest.push("--resume");
    train(d, "split", &rest);

    for f in ["stage1.ckpt", "stage2.ckpt", "lr_trace.csv", "metrics.jsonl", "pairs.csv", "config.toml"] {
        assert_eq!(read(d.join("whole").join(f)), read(d.join("split").join(f)), "{f} differs");
    }
    assert!(train(d, "split", &rest).contains("already complete"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "a", &["--seed", "11", "--budget", "0.05"]);
    train(d, "b", &["--seed", "11", "--budget", "0.05"]);
    for f in ["stage1.ckpt", "stage2.ckpt", "lr_trace.csv", "metrics.jsonl"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f} differs");
    }
}

/// One recording per activity at distant signal levels, so no window mixes classes.
fn separated_recordings(d: &Path) {
    let schema = "sample_rate_hz = 10.0\nindex_column = \"t\"\nchannels = [\"x\", \"y\"]\nlabel_column = \"label\"\n";
    std::fs::write(d.join("schema.toml"), schema).unwrap();
    for class in 0..3 {
        let mut csv = String::from("t,x,y,label\n");
        for t in 0..600 {
            let phase = t as f64 * 0.7;
            let x = 20.0 * class as f64 + phase.sin();
            let y = -20.0 * class as f64 + (1.0 + class as f64) * phase.cos();
            csv.push_str(&format!("{t},{x},{y},{class}\n"));
        }
        std::fs::write(d.join(format!("rec{class}.csv")), csv).unwrap();
    }
}

#[test]
fn well_separated_classes_cluster_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    separated_recordings(d);
    ok(&["prepare", "--out", "prep", "--schema", "schema.toml", "rec0.csv", "rec1.csv", "rec2.csv"], d);
    train(d, "run", &["--seed", "5", "--stage1-only"]);
    let report = eval_json(&ok(&["evaluate", "--checkpoint", "run/stage1.ckpt", "--prepared", "prep"], d));
    assert_eq!(report["acc"].as_f64(), Some(1.0), "{report}");
}

#[test]
fn embed_writes_one_row_per_segment() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--seed", "2", "--stage1-only"]);
    ok(&["embed", "--checkpoint", "run/stage1.ckpt", "--prepared", "prep", "--out", "e.csv"], d);
    let segments = String::from_utf8(read(d.join("prep/segments.csv"))).unwrap().lines().count();
    let rows = String::from_utf8(read(d.join("e.csv"))).unwrap().lines().count();
    assert_eq!(rows, segments);
}

#[test]
fn missing_schema_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = actembed(&["prepare", "--out", "p", "--schema", "absent.toml", "x.csv"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
    assert!(!dir.path().join("p").exists());
}

#[test]
fn missing_checkpoint_fails_without_a_report() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    let out = actembed(&["evaluate", "--checkpoint", "nope/stage2.ckpt", "--prepared", "prep", "--out", "eval.json"], d);
    assert_ne!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert!(!d.join("eval.json").exists());
}

#[test]
fn resume_checks_the_seed_and_the_run_directory() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--seed", "7", "--stage1-only"]);
    let base = ["train", "--prepared", "prep", "--out", "run"];
    let mut wrong = base.to_vec();
    wrong.extend(["--seed", "8", "--resume"]);
    assert_eq!(code(&actembed(&wrong, d)), 1);
    let mut again = base.to_vec();
    again.extend(["--seed", "7"]);
    assert_eq!(code(&actembed(&again, d)), 1);
    let fresh = ["train", "--prepared", "prep", "--out", "empty", "--seed", "7", "--resume"];
    assert_eq!(code(&actembed(&fresh, d)), 1);
}

#[test]
fn help_and_version_succeed_and_bad_flags_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(&["--help"], d).contains("Usage"));
    assert!(ok(&["train", "--help"], d).contains("--epoch-limit"));
    assert!(ok(&["--version"], d).contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(code(&actembed(&["--no-such-flag"], d)), 1);
    assert_eq!(code(&actembed(&["train", "--budget", "0.1", "--stage1-only"], d)), 1);
}

#[test]
fn set_overrides_reach_the_config_snapshot() {
    let ws = workspace("1.0", "0.5");
    let d = ws.path();
    train(d, "run", &["--seed", "1", "--budget", "0.1", "--set", "stage2.alpha=0.2", "--gamma", "0.3"]);
    let cfg: toml::Table = String::from_utf8(read(d.join("run/config.toml"))).unwrap().parse().unwrap();
    assert_eq!(cfg["stage2"]["alpha"].as_float(), Some(0.2));
    assert_eq!(cfg["stage2"]["gamma"].as_float(), Some(0.3));
    let bad = actembed(&["train", "--prepared", "prep", "--out", "x", "--seed", "1", "--set", "oops"], d);
    assert_eq!(code(&bad), 1);
}
