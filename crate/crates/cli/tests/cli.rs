use std::path::Path;
use std::process::{Command, Output};

use mapfuse::io::read_fused_maps;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapfuse"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "[data]\nscene_count = 6\ntrips_per_scene = 2\nval_percent = 50\n\n\
[model]\nd_model = 8\nn_heads = 2\nn_encoder_layers = 1\nn_decoder_layers = 1\nffn_dim = 16\nseg_rows = 4\nseg_cols = 4\n\n\
[train]\nbatch_size = 2\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "--seed", "5", "synth"]);
    dir
}

#[test]
fn gt_passthrough_scores_perfectly() {
    let dir = setup();
    ok(dir.path(), &["--config", "run.toml", "eval", "--dataset", "dataset.jsonl", "--gt-passthrough"]);
    let kv = std::fs::read_to_string(dir.path().join("report.kv")).unwrap();
    assert!(kv.lines().any(|l| l == "mAP=1"), "{kv}");
}

#[test]
fn full_pipeline_on_tiny_model() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "train", "--dataset", "dataset.jsonl", "--steps", "3"]);
    for f in ["model.ckpt", "metrics.jsonl", "run.toml"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(d.join("metrics.jsonl")).unwrap().lines().count(), 3);
    ok(d, &["--config", "run.toml", "eval", "--dataset", "dataset.jsonl", "--checkpoint", "model.ckpt", "--split", "val"]);
    ok(d, &["--config", "run.toml", "infer", "--dataset", "dataset.jsonl", "--checkpoint", "model.ckpt", "--threshold", "1"]);
    let maps = read_fused_maps(&d.join("fused.jsonl")).unwrap();
    assert_eq!(maps.len(), 6);
    assert!(maps.iter().all(|m| m.elements.is_empty()));
    ok(d, &["--config", "run.toml", "infer", "--dataset", "dataset.jsonl", "--checkpoint", "model.ckpt", "--threshold", "0"]);
    let maps = read_fused_maps(&d.join("fused.jsonl")).unwrap();
    assert!(maps.iter().all(|m| m.elements.len() == 15));
    ok(d, &["--config", "run.toml", "eval", "--dataset", "dataset.jsonl", "--predictions", "fused.jsonl"]);
    ok(d, &["--config", "run.toml", "render", "--dataset", "dataset.jsonl", "--predictions", "fused.jsonl"]);
    let svgs = std::fs::read_dir(d).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"));
    assert_eq!(svgs.count(), 1);
    let debug = ok(d, &["--config", "run.toml", "match-debug", "--dataset", "dataset.jsonl", "--checkpoint", "model.ckpt"]);
    assert!(!debug.is_empty());
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let a = setup();
    let b = setup();
    let read = |d: &Path| std::fs::read(d.join("dataset.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    ok(b.path(), &["--config", "run.toml", "--seed", "6", "synth"]);
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn malformed_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in ["[model]\nwidth = 3\n", "[noise]\nelement_dropout_prob = 2.0\n", "not toml ="].iter().enumerate() {
        let name = format!("bad{i}.toml");
        std::fs::write(dir.path().join(&name), text).unwrap();
        let out = run(dir.path(), &["--config", &name, "synth"]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    assert!(!dir.path().join("dataset.jsonl").exists());
}

#[test]
fn malformed_dataset_is_rejected() {
    let dir = setup();
    let d = dir.path();
    let text = std::fs::read_to_string(d.join("dataset.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(d.join("short.jsonl"), lines.join("\n")).unwrap();
    std::fs::write(d.join("garbage.jsonl"), "{\"format\": \"other\"}\n").unwrap();
    for bad in ["short.jsonl", "garbage.jsonl", "missing.jsonl"] {
        let out = run(d, &["--config", "run.toml", "eval", "--dataset", bad, "--gt-passthrough"]);
        assert!(!out.status.success(), "{bad} accepted");
    }
    let out = run(d, &["--config", "run.toml", "train", "--dataset", "dataset.jsonl", "--steps", "0"]);
    assert!(!out.status.success());
}
