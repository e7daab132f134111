#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nnwm"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Small, fast synthetic experiment on the small CNN.
pub fn base_config() -> Value {
    json!({
        "host": {"preset": "small-cnn"},
        "dataset": {
            "kind": "synthetic", "classes": 4, "height": 4, "width": 4, "channels": 2,
            "train_count": 128, "test_count": 128
        },
        "train": {"epochs": 3, "batch_size": 16, "situation": "train-to-embed"},
        "key": {"kind": "random", "T": 16},
        "seed": 7
    })
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
