use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
config_version = 1
seed = 5
out = "out"
schedule = "TS->CP"

[data]
n_train = 80
n_valid = 20
n_test = 20

[model]
emb_dim = 8
hidden_dim = 12
max_len = 12

[classifier]
emb_dim = 8
filters = 4
epochs = 2

[train]
batch_size = 16
warmup_epochs = 2
reward_epochs = 1
"#;

fn stylerl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylerl"))
        .current_dir(dir)
        .args(["--config", "small.toml"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stylerl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = stylerl(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["gen-data"]);
    for split in ["train", "valid", "test"] {
        for ext in ["src", "tgt"] {
            assert!(d.join(format!("out/data/{split}.{ext}")).exists());
        }
    }
    let vocab = fs::read_to_string(d.join("out/data/vocab.txt")).unwrap();
    assert!(vocab.starts_with("<pad>\n<unk>\n<s>\n</s>\n"));

    ok(d, &["train-classifier"]);
    assert!(d.join("out/classifier.ckpt").exists());

    let log = ok(d, &["train"]);
    assert!(log.contains("TS->CP finished"));
    let run = d.join("out/runs/ts-cp");
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let best = fs::read_to_string(run.join("best")).unwrap();
    assert!(best.trim().starts_with("ckpt-2-"));
    assert!(run.join(best.trim()).exists());
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["schedule"], "TS->CP");

    let report = ok(d, &["eval"]);
    assert!(report.contains("TS->CP"));
    let csv = fs::read_to_string(d.join("out/eval/report.csv")).unwrap();
    assert!(csv.starts_with("model,bleu,accuracy,overall,direction"));
    assert!(d.join("out/eval/report.json").exists() && d.join("out/eval/report.txt").exists());

    let transferred = ok(d, &["transfer", "i'm gonna see u tho"]);
    assert!(transferred.contains("formal-style score"));
}

#[test]
fn retraining_reproduces_history_and_checkpoints() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["gen-data"]);
    ok(d, &["--schedule", "copynmt", "train"]);
    let run = d.join("out/runs/copynmt");
    let history = fs::read(run.join("history.jsonl")).unwrap();
    let ckpt = fs::read(run.join("ckpt-0-2")).unwrap();
    ok(d, &["--schedule", "copynmt", "train"]);
    assert_eq!(fs::read(run.join("history.jsonl")).unwrap(), history);
    assert_eq!(fs::read(run.join("ckpt-0-2")).unwrap(), ckpt);
}

#[test]
fn missing_inputs_name_the_expected_path() {
    let tmp = workspace();
    let d = tmp.path();
    let err = fails(d, &["train"]);
    assert!(err.contains("out/data/vocab.txt"), "{err}");
    ok(d, &["gen-data"]);
    let err = fails(d, &["train"]);
    assert!(err.contains("out/classifier.ckpt"), "{err}");
    let err = fails(d, &["transfer", "hello"]);
    assert!(err.contains("out/runs/ts-cp/best"), "{err}");
    ok(d, &["train-classifier"]);
    let err = fails(d, &["eval", "--schedules", "cp"]);
    assert!(err.contains("out/runs/cp/best"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    let tmp = workspace();
    let d = tmp.path();
    let err = fails(d, &["transfer", "   "]);
    assert!(err.contains("no tokens"), "{err}");
    let err = fails(d, &["--schedule", "bogus", "gen-data"]);
    assert!(err.to_lowercase().contains("schedule"), "{err}");
    fs::write(d.join("small.toml"), "config_version = 1\nunknown_key = 3\n").unwrap();
    let err = fails(d, &["gen-data"]);
    assert!(err.contains("unknown_key"), "{err}");
    fs::write(d.join("small.toml"), "config_version = 2\n").unwrap();
    let err = fails(d, &["gen-data"]);
    assert!(err.contains("config_version"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let tmp = workspace();
    let out = ok(tmp.path(), &["gradcheck", "--instances", "1"]);
    assert!(out.contains("loss_ts") && !out.contains("FAIL"));
}
