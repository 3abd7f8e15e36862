#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn lift3d() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lift3d"));
    cmd.env_remove("LLM_ENDPOINT").env_remove("LLM_API_KEY").env_remove("LLM_MODEL");
    cmd
}

/// Runs in `dir` and returns the output, whatever the exit status.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    lift3d().current_dir(dir).args(args).output().expect("binary runs")
}

/// Runs in `dir`, asserts success and parses stdout as JSON.
pub fn ok_json(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?} stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

pub fn ok_text(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed single-line error object.
pub fn err_json(dir: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = run_in(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr is not one line: {stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"));
    (out.status.code().unwrap(), v)
}

pub fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Turns records into identity predictions: each response is its own reference.
pub fn identity_predictions(records_jsonl: &str) -> String {
    records_jsonl
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let r: serde_json::Value = serde_json::from_str(line).unwrap();
            let text = r["response"].as_str().unwrap();
            serde_json::json!({"id": format!("{}-{i}", r["scene_id"].as_str().unwrap()), "candidate": text, "references": [text]}).to_string() + "\n"
        })
        .collect()
}
