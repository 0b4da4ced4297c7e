use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtasr::model::ModelConfig;

fn mtasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mtasr(args);
    assert!(
        out.status.success(),
        "mtasr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny dataset plus a config with a handful of training steps.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["gen-data", "--seed", "5", "--train", "4", "--dev", "6", "--eval", "2", "--out", s(&data)]);
    let mut cfg = ModelConfig::default();
    cfg.train.phase1_steps = 2;
    cfg.train.phase2_steps = 2;
    cfg.train.tch_steps = 2;
    cfg.train.batch_size = 2;
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (data.join("manifest.json"), cfg_path)
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = setup(dir.path());
    let (m, c) = (s(&manifest), s(&cfg));
    let p1 = dir.path().join("p1");
    let p2 = dir.path().join("p2");
    let tch = dir.path().join("tch");
    ok(&["train-phase1", "--manifest", m, "--config", c, "--seed", "1", "--out", s(&p1)]);
    let ck1 = p1.join("model.ckpt");
    ok(&["train-phase2", "--manifest", m, "--checkpoint", s(&ck1), "--alpha", "0.3", "--out", s(&p2)]);
    ok(&["train-tch", "--manifest", m, "--checkpoint", s(&p2.join("model.ckpt")), "--out", s(&tch)]);
    let ck = tch.join("model.ckpt");

    let summary = read_json(&p2.join("summary.json"));
    assert_eq!(summary["run"]["alpha"], 0.3);
    assert_eq!(summary["results"]["steps"], 2);
    assert!(summary["build"].as_str().is_some_and(|b| !b.is_empty()));
    let loss = std::fs::read_to_string(p2.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    for (flag, dir_name) in [(Some("--oracle-count"), "eval-oracle"), (None, "eval-tch")] {
        let out = dir.path().join(dir_name);
        let mut args = vec!["eval", "--manifest", m, "--checkpoint", s(&ck), "--out", s(&out)];
        args.extend(flag);
        let text = ok(&args);
        assert!(text.contains("2-mix") && text.contains("3-mix"));
        let rows = std::fs::read_to_string(out.join("error_rates.csv")).unwrap();
        assert_eq!(rows.lines().count(), 1 + 4);
        let acc = std::fs::read_to_string(out.join("count_accuracy.csv")).unwrap();
        assert!(acc.starts_with("split,talkers,condition,correct,total,accuracy"));
        let summary = read_json(&out.join("summary.json"));
        assert_eq!(summary["run"]["oracle_count"], flag.is_some());
        assert_eq!(summary["run"]["command"], "eval");
    }
    let oracle = read_json(&dir.path().join("eval-oracle/summary.json"));
    assert_eq!(oracle["results"]["by_talkers"]["3mix"]["count_accuracy"], 100.0);

    let rtf = dir.path().join("rtf");
    ok(&["bench-rtf", "--manifest", m, "--checkpoint", s(&ck), "--oracle-count", "--out", s(&rtf)]);
    let table = std::fs::read_to_string(rtf.join("rtf.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    let text = ok(&["decode", "--manifest", m, "--checkpoint", s(&ck), "--index", "1", "--decode-mode", "beam:3"]);
    assert!(text.contains("stream 0:") && text.contains("ref    1:"));
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = setup(dir.path());
    let (m, c) = (s(&manifest), s(&cfg));
    let mut seen = Vec::new();
    for _ in 0..2 {
        let out = dir.path().join("run");
        ok(&["train-phase1", "--manifest", m, "--config", c, "--out", s(&out)]);
        let ck = out.join("model.ckpt");
        let ev = dir.path().join("eval");
        ok(&["eval", "--manifest", m, "--checkpoint", s(&ck), "--oracle-count", "--out", s(&ev)]);
        seen.push(
            ["summary.json", "error_rates.csv", "count_accuracy.csv"]
                .map(|f| std::fs::read(ev.join(f)).unwrap())
                .into_iter()
                .chain([std::fs::read(&ck).unwrap()])
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(seen[0], seen[1]);

    let other = dir.path().join("data2");
    ok(&["gen-data", "--seed", "5", "--train", "4", "--dev", "6", "--eval", "2", "--out", s(&other)]);
    for f in ["train.bin", "dev.bin", "eval.bin"] {
        assert_eq!(
            std::fs::read(manifest.parent().unwrap().join(f)).unwrap(),
            std::fs::read(other.join(f)).unwrap()
        );
    }
}

#[test]
fn failing_preconditions_exit_nonzero_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = setup(dir.path());
    let out = mtasr(&["eval", "--manifest", s(&manifest), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));

    let out = mtasr(&["train-phase2", "--manifest", s(&manifest), "--config", s(&cfg), "--alpha", "0.3", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase 1"));

    let out = mtasr(&["eval", "--decode-mode", "beam:0", "--out", s(dir.path())]);
    assert!(!out.status.success());
}
