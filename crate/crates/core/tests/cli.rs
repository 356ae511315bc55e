use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
run_name = "smoke"
seed = 3

[synth]
sentiment_train = 60
sentiment_val = 30
aggression_train = 60
aggression_val = 30
per_target = 40

[synth.lexicon]
polarity_words = 6
aggression_markers = 6
filler_words = 20
min_filler = 2
max_filler = 4

[synth.sizes]
train = 60
val = 30
test = 30

[cue.encoder]
n_layers = 1
d_model = 8
n_heads = 2
d_head = 4
d_ff = 16
max_len = 12
dropout = 0.0

[cue.schedule]
learning_rate = 0.005
max_epochs = 1

[detector.encoder]
n_layers = 1
d_model = 8
n_heads = 2
d_head = 4
d_ff = 16
max_len = 12
dropout = 0.0

[schedule]
learning_rate = 0.005
max_epochs = 2

[eval]
seeds = [0, 1]
"#;

fn cueguard(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cueguard"))
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) {
    let out = cueguard(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn prepare(root: &Path) -> String {
    let cfg = root.join("config.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    ok(root, &["gen-synth", "--config", &cfg]);
    ok(root, &["pretrain-cue", "--config", &cfg, "--task", "sentiment"]);
    ok(root, &["pretrain-cue", "--config", &cfg, "--task", "aggression"]);
    cfg
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cueguard(dir.path(), &["eval-cross"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cueguard(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cueguard(dir.path(), &["eval-cross", "--config", "does-not-exist.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn full_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = prepare(root);
    let run = root.join("smoke");

    ok(root, &["eval-cross", "--config", &cfg]);
    let csv = fs::read_to_string(run.join("results/eval-cross.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "source,platform0,platform1,platform2");
    assert_eq!(lines.count(), 3);
    assert!(run.join("results/manifest-eval-cross.json").exists());

    ok(root, &["eval-target", "--config", &cfg]);
    assert!(run.join("results/eval-target.csv").exists());

    ok(root, &["train", "--config", &cfg]);
    assert!(run.join("model/detector.ckpt").exists());

    ok(root, &["errors", "--config", &cfg]);
    assert!(run.join("results/errors-platform0.csv").exists());

    ok(root, &["explain", "--config", &cfg, "--text", "some words here"]);
    let html = fs::read_to_string(run.join("results/explain/case-000.html")).unwrap();
    assert!(html.contains("<table>"));
}

#[test]
fn ingest_splits_a_raw_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let raw = root.join("raw.csv");
    let mut text = String::from("text,raw_score\n");
    for i in 0..50 {
        text.push_str(&format!("\"text {i}\",{}\n", if i % 5 == 0 { 0.9 } else { 0.1 }));
    }
    fs::write(&raw, text).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    ok(root, &["ingest", "--config", &cfg, "--input", raw.to_str().unwrap(), "--platform", "web", "--format", "csv"]);
    let dir = root.join("smoke/data/web");
    let count = |s: &str| fs::read_to_string(dir.join(format!("{s}.jsonl"))).unwrap().lines().count();
    assert_eq!(count("train") + count("val") + count("test"), 50);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = prepare(root);
    let results = root.join("smoke/results");
    let snapshot = || {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&results)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    ok(root, &["ablate", "--config", &cfg]);
    let first = snapshot();
    assert!(first.iter().any(|(n, _)| n == "ablation.csv"));
    ok(root, &["ablate", "--config", &cfg]);
    assert_eq!(first, snapshot());
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let (cfg, hash) = cueguard::config::Config::load(&path).unwrap();
    assert_eq!(cfg.run_name, "desk");
    assert_eq!(cfg.schedule.head_lr_scale, 10.0);
    assert_eq!(hash.len(), 64);
}
