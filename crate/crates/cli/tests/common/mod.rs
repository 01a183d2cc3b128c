#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `hlstcm` binary in `cwd`.
pub fn hlstcm(cwd: &Path, args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_hlstcm")).args(args).current_dir(cwd).output().expect("binary runs");
    Outcome {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// As [`hlstcm`], failing the test unless the exit code is 0.
pub fn ok(cwd: &Path, args: &[&str]) -> Outcome {
    let o = hlstcm(cwd, args);
    assert_eq!(o.code, 0, "hlstcm {args:?} failed:\n{}", o.stderr);
    o
}

/// A tiny dataset in `cwd/d`: 2 persons, 3 steps, 4 features, 2 classes.
pub fn tiny_data(cwd: &Path) {
    ok(
        cwd,
        &["gen", "--p", "2", "--seq-len", "3", "--d-x", "4", "--classes", "2", "--n-train", "8", "--n-test", "4", "--seed", "5", "--out-dir", "d"],
    );
}

pub const TINY_MODEL: [&str; 6] = ["--d-sp", "3", "--d-proj", "2", "--d-co", "3"];

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
