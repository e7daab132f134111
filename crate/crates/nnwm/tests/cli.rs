mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{base_config, code, run, s, write_config};
use serde_json::{json, Value};

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn json_file(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_attack_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["attacks"] = json!([
        {"kind": "prune", "alphas": [0.0, 0.25, 0.5, 0.75, 1.0]},
        {"kind": "finetune", "epochs": 1},
        {"kind": "overwrite", "epochs": 1, "key": {"kind": "random", "T": 8}},
        {"kind": "posthoc", "lambda": 1.0, "steps": 20}
    ]);
    let config = write_config(tmp.path(), "cfg.json", &cfg);
    let mut outputs = Vec::new();
    for run_name in ["a", "b"] {
        let dir = tmp.path().join(run_name);
        let out = run(&["train", "--config", s(&config), "--out", s(&dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let ckpt = dir.join("model.ckpt");
        let out = run(&["attack", "--config", s(&config), "--checkpoint", s(&ckpt)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(dir_contents(&dir));
    }
    assert_eq!(outputs[0], outputs[1]);
    let files: Vec<&String> = outputs[0].keys().collect();
    for expected in [
        "model.ckpt",
        "history.csv",
        "summary.json",
        "key.json",
        "message.json",
    ] {
        assert!(
            files.iter().any(|f| f.as_str() == expected),
            "{expected} missing from {files:?}"
        );
    }

    let attacks = tmp.path().join("a/attacks");
    let csv = fs::read_to_string(attacks.join("attack-0-prune.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,order,E_R,BER");
    assert_eq!(lines.len(), 1 + 5 * 3);

    let finetune = json_file(&attacks.join("attack-1-finetune.json"));
    assert!(finetune.get("E_R").is_some() && finetune.get("E'_R").is_some());
    let overwrite = json_file(&attacks.join("attack-2-overwrite.json"));
    assert!(overwrite["ber_after"].is_number() && overwrite["new_watermark_ber"].is_number());
    assert_eq!(
        overwrite["config_hash"],
        json_file(&tmp.path().join("a/summary.json"))["config_hash"]
    );

    let history = fs::read_to_string(tmp.path().join("a/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,E0,E_R,test_error"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn zero_lambda_summary_has_no_embedding_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["train"]["lambda"] = json!(0.0);
    let config = write_config(tmp.path(), "cfg.json", &cfg);
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 0);
    let summary = json_file(&tmp.path().join("r/summary.json"));
    assert!(summary.get("E_R").is_none());
    assert!(summary.get("BER").is_some());
    let history = fs::read_to_string(tmp.path().join("r/history.csv")).unwrap();
    assert!(history
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("")));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "cfg.json", &base_config());
    run(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("x")),
        "--seed",
        "99",
    ]);
    let summary = json_file(&tmp.path().join("x/summary.json"));
    assert_eq!(summary["seed"], 99);
}

#[test]
fn extract_reports_bits_histogram_and_ber() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "cfg.json", &base_config());
    let dir = tmp.path().join("r");
    run(&["train", "--config", s(&config), "--out", s(&dir)]);
    let out = run(&[
        "extract",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--key",
        s(&dir.join("key.json")),
        "--message",
        s(&dir.join("message.json")),
    ]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["T"], 16);
    assert_eq!(v["hex"].as_str().unwrap().len(), 4);
    assert_eq!(v["histogram"]["counts"].as_array().unwrap().len(), 32);
    let total: u64 = v["histogram"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 16);
    assert_eq!(v["BER"], json_file(&dir.join("summary.json"))["BER"]);

    // Key for a different M.
    let wrong = tmp.path().join("wrong.json");
    fs::write(
        &wrong,
        r#"{"kind":"random","seed":1,"T":16,"M":100,"version":1}"#,
    )
    .unwrap();
    let out = run(&[
        "extract",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--key",
        s(&wrong),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("M"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = base_config();
    bad["key"]["M"] = json!(12);
    let config = write_config(tmp.path(), "bad.json", &bad);
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("key.M"));
    assert!(!tmp.path().join("r").exists());

    let out = run(&["train", "--config", s(&tmp.path().join("absent.json"))]);
    assert_eq!(code(&out), 3);

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let key = tmp.path().join("key.json");
    fs::write(
        &key,
        r#"{"kind":"random","seed":1,"T":4,"M":144,"version":1}"#,
    )
    .unwrap();
    let out = run(&["extract", "--checkpoint", s(&junk), "--key", s(&key)]);
    assert_eq!(code(&out), 3);

    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);

    let cifar = json!({
        "host": {"preset": "small-cnn"},
        "dataset": {"kind": "cifar10", "dir": s(&tmp.path().join("nowhere")), "train_count": 10, "test_count": 10},
        "train": {"epochs": 1, "situation": "none"}
    });
    let config = write_config(tmp.path(), "cifar.json", &cifar);
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            s(&config),
            "--out",
            s(&tmp.path().join("c"))
        ])),
        3
    );
}

#[test]
fn grad_check_command() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "cfg.json", &base_config());
    let out = run(&["grad-check", "--config", s(&config), "--samples", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-4);

    // An impossible tolerance is a numeric failure.
    let out = run(&[
        "grad-check",
        "--config",
        s(&config),
        "--samples",
        "2",
        "--tolerance",
        "0",
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn report_on_empty_dir_warns_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["report", s(tmp.path())]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("No runs found"));
}

#[test]
fn report_lists_missing_runs_and_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let mut cfg = base_config();
    cfg["attacks"] = json!([
        {"kind": "prune", "alphas": [0.0, 0.5]},
        {"kind": "finetune", "epochs": 1},
        {"kind": "posthoc", "lambda": 10.0, "steps": 10}
    ]);
    let config = write_config(tmp.path(), "cfg.json", &cfg);
    for seed in ["1", "2"] {
        let dir = runs.join(format!("seed{seed}"));
        assert_eq!(
            code(&run(&[
                "train",
                "--config",
                s(&config),
                "--out",
                s(&dir),
                "--seed",
                seed
            ])),
            0
        );
        let ckpt = dir.join("model.ckpt");
        assert_eq!(
            code(&run(&[
                "attack",
                "--config",
                s(&config),
                "--checkpoint",
                s(&ckpt),
                "--seed",
                seed
            ])),
            0
        );
    }
    let mut plain = base_config();
    plain["train"]["situation"] = json!("none");
    plain.as_object_mut().unwrap().remove("key");
    let plain = write_config(tmp.path(), "plain.json", &plain);
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            s(&plain),
            "--out",
            s(&runs.join("plain"))
        ])),
        0
    );
    fs::create_dir_all(runs.join("crashed")).unwrap();

    let first = tmp.path().join("report1");
    let second = tmp.path().join("report2");
    assert_eq!(code(&run(&["report", s(&runs), "--out", s(&first)])), 0);
    assert_eq!(code(&run(&["report", s(&runs), "--out", s(&second)])), 0);
    assert_eq!(dir_contents(&first), dir_contents(&second));

    let md = fs::read_to_string(first.join("report.md")).unwrap();
    for title in [
        "## Fidelity",
        "## Capacity",
        "## Key kinds",
        "## Post-hoc lambda sweep",
        "## Pruning",
        "## Fine-tuning",
    ] {
        assert!(md.contains(title), "{title} missing");
    }
    assert!(md.contains("## Missing or incomplete runs") && md.contains("`crashed`"));
    assert!(md.contains("Seeds: 1, 2"));
    assert!(md.contains("Mean test error: embedded"));
    let pruning = fs::read_to_string(first.join("pruning.csv")).unwrap();
    assert_eq!(pruning.lines().count(), 1 + 2 * 3);
    assert!(
        pruning.lines().nth(1).unwrap().ends_with(",2,")
            || pruning.lines().nth(1).unwrap().contains(",2,")
    );
}
