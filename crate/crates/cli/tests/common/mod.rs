#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_interassort");

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Runs the binary against `data_dir` in deterministic mode.
pub fn run(data_dir: &Path, args: &[&str]) -> Output {
    run_with_input(data_dir, args, "")
}

pub fn run_with_input(data_dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = Command::new(BIN)
        .arg("--data-dir")
        .arg(data_dir)
        .args(args)
        .env("INTERASSORT_MODE", "deterministic")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn interassort");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// A fresh store with the fixture catalog and parameters ingested through
/// the CLI.
pub fn fixture_data_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = fixture_dir().join("ta-feng");
    for (kind, file) in [("catalog", "catalog.csv"), ("parameters", "parameters.csv")] {
        let path = fixtures.join(file);
        let out = run(
            dir.path(),
            &[
                "ingest",
                kind,
                "--path",
                path.to_str().unwrap(),
                "--dataset",
                "ta-feng",
            ],
        );
        assert!(out.status.success(), "ingest {kind}: {}", stderr(&out));
    }
    dir
}

/// Splits `solve` output into the reply text and the parsed result.
pub fn split_solve(out: &str) -> (String, serde_json::Value) {
    let (text, json) = out.split_once("\n---\n").expect("separator line");
    (
        text.to_string(),
        serde_json::from_str(json).expect("result json"),
    )
}

pub struct Server {
    child: Child,
    pub base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `interassort serve` on an ephemeral port.
pub fn serve(data_dir: &Path, env: &[(&str, &str)]) -> Server {
    let mut command = Command::new(BIN);
    command
        .arg("--data-dir")
        .arg(data_dir)
        .args(["serve", "--port", "0"])
        .env("INTERASSORT_MODE", "deterministic")
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    for (k, v) in env {
        command.env(k, v);
    }
    let mut child = command.spawn().expect("spawn server");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected server banner `{line}`"))
        .to_string();
    Server { child, base }
}
