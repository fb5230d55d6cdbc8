//! The `gapl` binary on a tiny configuration: artifacts, chaining, exit codes
//! and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "run": {
    "corpus": {"n_per_class": 24, "image_size": 16},
    "encoder": {"image_size": 16, "patch_size": 4, "dim": 16, "depth": 1},
    "prior": {"kind": "random"},
    "stage1": {"m_per_family": 16, "train": {"epochs": 2, "hidden": 32}},
    "prototypes": {"n": 8},
    "stage2": {"train": {"max_epochs": 2}},
    "eval": {"families": [1, 4], "n_per_class": 8, "jpeg": [0, 50], "blur": [0, 1]}
  },
  "hetero": {"ks": [1, 2], "n_per_class": 16, "eval_n_per_class": 16, "head": {"epochs": 2, "hidden": 32}, "e2e": {"epochs": 1, "hidden": 32}},
  "ablation": {"seeds": [0], "seen": [1], "unseen": [4], "eval_n_per_class": 8}
}"#;

fn gapl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gapl"))
        .args(args)
        .arg("--config")
        .arg(dir.join("tiny.json"))
        .output()
        .expect("spawn gapl")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

#[test]
fn chained_stages_write_every_artifact() {
    let d = setup();
    let run = d.path().join("run");
    let r = run.to_str().unwrap();
    for args in [
        vec!["synth-data", "--out", r],
        vec!["train-stage1", "--out", r],
        vec!["extract-prototypes", "--from", r, "--out", r],
        vec!["train-stage2", "--from", r, "--out", r],
        vec!["eval", "--from", r, "--out", r],
        vec!["robustness", "--from", r, "--out", r],
        vec!["attn-report", "--from", r, "--out", r],
    ] {
        ok(&gapl(d.path(), &args));
    }
    let eval = run.join("eval.embx");
    ok(&gapl(d.path(), &["predict", "--from", r, "--input", eval.to_str().unwrap(), "--out", r]));
    for f in [
        "config.json",
        "run.json",
        "corpus.embx",
        "eval.embx",
        "encoder.gapw",
        "stage1.gapw",
        "prototypes.gapw",
        "forgery.embx",
        "model.gapw",
        "history.json",
        "eval.json",
        "variance_bound.json",
        "robustness.csv",
        "attention.json",
        "scores.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["schema"], 1);
    let robust = std::fs::read_to_string(run.join("robustness.csv")).unwrap();
    assert_eq!(robust.lines().count(), 1 + 4);
    let scores = std::fs::read_to_string(run.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 2 * 8);
    let runinfo: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(runinfo["subcommand"], "predict");
    assert_eq!(runinfo["schema"], 1);
}

#[test]
fn resolved_config_applies_precedence() {
    let d = setup();
    let out = d.path().join("o");
    ok(&gapl(d.path(), &["synth-data", "--seed", "7", "--n-per-class", "5", "--out", out.to_str().unwrap()]));
    let c: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(c["run"]["seed"], 7);
    assert_eq!(c["run"]["corpus"]["n_per_class"], 5);
    assert_eq!(c["run"]["corpus"]["image_size"], 16);
    assert_eq!(c["run"]["stage2"]["model"]["lora"]["rank"], 16);
}

#[test]
fn train_stage2_reproduces_bitwise() {
    let d = setup();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&gapl(d.path(), &["train-stage2", "--out", a.to_str().unwrap()]));
    ok(&gapl(d.path(), &["train-stage2", "--out", b.to_str().unwrap()]));
    for f in ["model.gapw", "history.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn hetero_and_ablation_reports() {
    let d = setup();
    let out = d.path().join("o");
    let o = out.to_str().unwrap();
    ok(&gapl(d.path(), &["analyze-hetero", "--k", "1,2", "--out", o]));
    let csv = std::fs::read_to_string(out.join("hetero.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "k,trace_real,trace_gen,fisher_frozen,fisher_e2e,acc_frozen,acc_e2e");
    assert_eq!(lines.count(), 2);
    ok(&gapl(d.path(), &["ablate", "--grid", "pm,lora,pca", "--out", o]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let groups: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups, ["1", "2", "3", "4", "5", "ours"]);
}

#[test]
fn verify_passes_and_reproduces() {
    let d = setup();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let o = gapl(d.path(), &["verify", "--out", a.to_str().unwrap()]);
    ok(&o);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().count() >= 25 && table.lines().all(|l| l.starts_with("PASS")), "{table}");
    ok(&gapl(d.path(), &["verify", "--out", b.to_str().unwrap()]));
    assert_eq!(std::fs::read(a.join("verify.json")).unwrap(), std::fs::read(b.join("verify.json")).unwrap());
}

#[test]
fn exit_codes() {
    let d = setup();
    let out = d.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(gapl(d.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(gapl(d.path(), &["verify", "--bogus-flag", "--out", o]).status.code(), Some(2));
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"run": {"prototypes": {"n": 7}}}"#).unwrap();
    let code = Command::new(env!("CARGO_BIN_EXE_gapl"))
        .args(["synth-data", "--out", o, "--config", bad.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .code();
    assert_eq!(code, Some(2), "odd prototype count is a config error");
    let missing = d.path().join("nowhere");
    assert_eq!(
        gapl(d.path(), &["eval", "--from", missing.to_str().unwrap(), "--out", o]).status.code(),
        Some(3)
    );
    let junk = d.path().join("junk.embx");
    std::fs::write(&junk, b"not an embx file").unwrap();
    let model_dir = d.path().join("m");
    ok(&gapl(d.path(), &["train-stage2", "--out", model_dir.to_str().unwrap()]));
    assert_eq!(
        gapl(d.path(), &["predict", "--from", model_dir.to_str().unwrap(), "--input", junk.to_str().unwrap(), "--out", o])
            .status
            .code(),
        Some(3)
    );
}
