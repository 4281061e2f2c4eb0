//! Command-line behaviour: determinism, guards, outputs and exit codes.

mod common;

use std::fs;
use std::process::Command;

use common::{path_str, read_tree, run};
use polarloc::cli::{CHECKPOINT_FILE, EXIT_USAGE, TRAIN_LOG_FILE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_polarloc"))
}

#[test]
fn gen_is_deterministic_and_writes_all_traversals() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let (code, out) = run(&["gen", "--seed", "7", "--out", path_str(dir)]);
        assert_eq!(code, 0);
        assert!(out.contains("map: 200 scans") && out.contains("query: 200 scans"), "{out}");
    }
    // config_gen.json records the (differing) output path; everything else must match.
    let strip = |mut t: std::collections::BTreeMap<std::path::PathBuf, Vec<u8>>| {
        assert!(t.remove(std::path::Path::new("config_gen.json")).is_some());
        t
    };
    let (ta, tb) = (strip(read_tree(&a)), strip(read_tree(&b)));
    assert_eq!(ta, tb, "datasets differ");
    for t in ["train", "map", "query"] {
        assert!(ta.keys().filter(|p| p.starts_with(format!("{t}/scans"))).count() > 0);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&ta[std::path::Path::new("manifest.json")]).unwrap();
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn zero_landmarks_is_rejected_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["gen", "--landmarks", "0", "--out"])
        .arg(tmp.path().join("ds"))
        .status()
        .unwrap();
    assert_ne!(status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bin().args(["train", "--bogus"]).status().unwrap().code(), Some(EXIT_USAGE));
    assert_eq!(bin().args(["frobnicate"]).status().unwrap().code(), Some(EXIT_USAGE));
    assert_eq!(bin().args(["gen", "--threads", "0"]).status().unwrap().code(), Some(EXIT_USAGE));
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
}

#[test]
fn zero_epochs_eval_and_method_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    let eval_dir = tmp.path().join("eval");
    assert_eq!(run(&["gen", "--seed", "3", "--out", path_str(&data)]).0, 0);

    // --epochs 0: initialized checkpoint, log with only its header.
    let (code, _) = run(&["train", "--data", path_str(&data), "--out", path_str(&run_dir), "--epochs", "0"]);
    assert_eq!(code, 0);
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    assert!(checkpoint.exists());
    assert!(run_dir.join("model.ploc.json").exists());
    assert!(run_dir.join("config_train.json").exists());
    let log = fs::read_to_string(run_dir.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log, "epoch,mean_loss,active_fraction,wall_seconds\n");

    // Ring key: 20-row report (N = 1..10 x {5, 10} m).
    let (code, out) = run(&["eval", "--data", path_str(&data), "--method", "ringkey", "--out", path_str(&eval_dir)]);
    assert_eq!(code, 0);
    assert!(out.contains("ringkey: Recall@1(5 m)"), "{out}");
    let csv = fs::read_to_string(eval_dir.join("ringkey_recall.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert_eq!(csv.lines().next(), Some("N,threshold_m,recall"));
    assert!(eval_dir.join("config_eval_ringkey.json").exists());

    // Map used as its own query: every query finds its duplicate.
    let map = data.join("map");
    let (code, out) = run(&[
        "eval", "--data", path_str(&data), "--map", path_str(&map), "--query", path_str(&map), "--method", "radarloc",
        "--checkpoint", path_str(&checkpoint), "--out", path_str(&eval_dir),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("radarloc: Recall@1(5 m) = 1.0000"), "{out}");

    // Method / checkpoint mismatches.
    let status = bin()
        .args(["eval", "--method", "radarloc", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&eval_dir)
        .status()
        .unwrap();
    assert_ne!(status.code(), Some(0));
    let status = bin()
        .args(["eval", "--method", "scancontext", "--data"])
        .arg(&data)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--out")
        .arg(&eval_dir)
        .status()
        .unwrap();
    assert_ne!(status.code(), Some(0));

    // Index writes both descriptor files.
    let (code, _) = run(&["index", "--data", path_str(&data), "--method", "scancontext", "--out", path_str(&eval_dir)]);
    assert_eq!(code, 0);
    let bytes = fs::read(eval_dir.join("scancontext_map.pdsc")).unwrap();
    assert!(bytes.starts_with(b"PDSC 1024 200 scancontext/64x16\n"));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["train", "--data"])
        .arg(tmp.path().join("nope"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn selftest_passes_and_names_an_injected_failure() {
    let out = bin().args(["selftest", "--inject-gradient-bug"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(2), "{text}");
    let passed = text.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passed >= 12, "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL injected_gradient_bug")), "{text}");
    assert!(text.contains("1 of"), "{text}");
    assert!(text.trim_end().ends_with("injected_gradient_bug"), "{text}");
}
