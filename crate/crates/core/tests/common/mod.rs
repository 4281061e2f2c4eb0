//! Shared helpers for driving the command-line pipeline in-process.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use polarloc::cli::{self, Cli};
use polarloc::retrieval::EvalReport;

use clap::Parser;

pub fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("polarloc").chain(args.iter().copied())).expect("valid command line")
}

/// Runs a command and returns its exit code and captured standard output.
pub fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = match cli::run(cli(args), &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("command {args:?} failed: {e}");
            cli::EXIT_FAILURE
        }
    };
    (code, String::from_utf8(out).expect("utf-8 output"))
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every regular file below `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("below root").to_path_buf();
                files.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    files
}

/// Output of one gen -> train -> eval run.
pub struct PipelineRun {
    pub root: tempfile::TempDir,
    pub seconds_gen_train_eval: f64,
    pub reports: BTreeMap<&'static str, EvalReport>,
}

impl PipelineRun {
    pub fn data(&self) -> PathBuf {
        self.root.path().join("data")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.path().join("run")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.path().join("eval")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir().join(cli::CHECKPOINT_FILE)
    }
}

fn eval(args: &[&str]) -> EvalReport {
    match cli(args).command {
        cli::Command::Eval(a) => cli::cmd_eval(&a, &mut std::io::sink()).expect("eval succeeds"),
        _ => unreachable!(),
    }
}

/// `gen --seed <seed>`, `train` with default hyper-parameters, then `eval`
/// for RadarLoc, ScanContext and Ring key.
pub fn full_pipeline(seed: u64) -> PipelineRun {
    let root = tempfile::tempdir().expect("temp dir");
    let seed_s = seed.to_string();
    let data = root.path().join("data");
    let run_dir = root.path().join("run");
    let eval_dir = root.path().join("eval");
    let start = std::time::Instant::now();
    let (code, _) = run(&["gen", "--seed", &seed_s, "--threads", "1", "--out", path_str(&data)]);
    assert_eq!(code, 0, "gen failed");
    let (code, _) = run(&[
        "train", "--data", path_str(&data), "--out", path_str(&run_dir), "--seed", &seed_s, "--threads", "1",
    ]);
    assert_eq!(code, 0, "train failed");
    let checkpoint = run_dir.join(cli::CHECKPOINT_FILE);
    let mut reports = BTreeMap::new();
    reports.insert(
        "radarloc",
        eval(&[
            "eval", "--data", path_str(&data), "--method", "radarloc", "--checkpoint", path_str(&checkpoint),
            "--out", path_str(&eval_dir), "--threads", "1",
        ]),
    );
    let seconds = start.elapsed().as_secs_f64();
    for method in ["scancontext", "ringkey"] {
        reports.insert(
            method,
            eval(&["eval", "--data", path_str(&data), "--method", method, "--out", path_str(&eval_dir)]),
        );
    }
    PipelineRun {
        root,
        seconds_gen_train_eval: seconds,
        reports,
    }
}
