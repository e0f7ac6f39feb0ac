use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relcon")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Six relations, four of them for training.
fn small_synth(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"n_relations": 6, "instances_per_relation": 20, "vocab_size": 200, "n_train_relations": 4, "rng_seed": 3}"#,
    )
    .unwrap();
    let o = relcon(&["gen-synth", "--spec", p(&spec), "--out", p(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn write_config(dir: &Path, lr: f64) -> std::path::PathBuf {
    let cfg = dir.join("run.json");
    let text = serde_json::json!({
        "corpus": {"train": "data/train.jsonl", "eval": "data/heldout.jsonl"},
        "labels": "data/labels.json",
        "encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32, "max_seq_len": 32},
        "preprocess": {"max_seq_len": 32},
        "train": {"batch_size": 8, "epochs": 2, "lr": lr},
        "eval": {"n": 2, "episodes": 20}
    });
    fs::write(&cfg, text.to_string()).unwrap();
    cfg
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&relcon(&["--help"])), 0);
    let o = relcon(&["pretrain", "--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"objective_mode\""));
    assert_eq!(code(&relcon(&["bogus"])), 1);
    let o = relcon(&["pretrain", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));
    assert_eq!(code(&relcon(&["eval-fewshot", "--checkpoint", "c", "--n", "five"])), 1);
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&relcon(&["gen-synth", "--out", p(out), "--seed", "11"])), 0);
    }
    for f in ["corpus.jsonl", "train.jsonl", "heldout.jsonl", "labels.json", "spec.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = fs::read_to_string(a.join("corpus.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 20 * 50);
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = relcon(&["pretrain", "--config", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"corpus": {"train": "t"}, "labels": "l", "surprise": 1}"#).unwrap();
    let o = relcon(&["pretrain", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d);
    let cfg = write_config(d, 1e-3);
    let run = d.join("run");
    let log = d.join("events.jsonl");
    let o = relcon(&["--log", p(&log), "pretrain", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.bin", "vocab.json", "config.json", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    // 4 relations x 20 sentences, batches of 8, 2 epochs.
    let steps = fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count();
    assert_eq!(steps, 20);
    let events = fs::read_to_string(&log).unwrap();
    assert!(events.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let ck = run.join("checkpoint.bin");
    let corpus = d.join("data/corpus.jsonl");
    let labels = d.join("data/labels.json");
    let report = d.join("fewshot.json");
    let o = relcon(&[
        "eval-fewshot", "--config", p(&cfg), "--checkpoint", p(&ck), "--corpus", p(&corpus),
        "--episodes", "50", "--out", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(r["episodes"], 50);

    // Held-out split from the config: 2 relations.
    let o = relcon(&["eval-zeroshot", "--config", p(&cfg), "--checkpoint", p(&ck), "--n", "2", "--episodes", "30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = relcon(&["eval-zeroshot", "--config", p(&cfg), "--checkpoint", p(&ck), "--episodes", "30"]);
    assert_eq!(code(&o), 2, "5-way needs 5 relations: {}", stderr(&o));

    let m = d.join("metrics.json");
    let o = relcon(&[
        "metrics", "--checkpoint", p(&ck), "--corpus", p(&d.join("data/train.jsonl")), "--labels", p(&labels),
        "--out", p(&m),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
    let align = m["align"].as_f64().unwrap();
    let uniform = m["uniform"].as_f64().unwrap();
    assert!((0.0..=4.0).contains(&align), "{align}");
    assert!((-4.0..=0.0).contains(&uniform), "{uniform}");

    let csv = d.join("emb.csv");
    let o = relcon(&[
        "export-embeddings", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--labels", p(&labels),
        "--relations", "R00,R01,R02,R03,R05", "--out", p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 20 + 5);

    let o = relcon(&[
        "export-embeddings", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--labels", p(&labels),
        "--relations", "R00,R99", "--out", p(&csv),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("R99"), "{}", stderr(&o));
}

#[test]
fn resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d);
    let cfg = write_config(d, 1e-3);
    let straight = d.join("straight");
    let o = relcon(&["pretrain", "--config", p(&cfg), "--out", p(&straight)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let half = d.join("half");
    let o = relcon(&["pretrain", "--config", p(&cfg), "--out", p(&half), "--max-steps", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rest = d.join("rest");
    let o = relcon(&["pretrain", "--config", p(&cfg), "--out", p(&rest), "--resume", p(&half.join("checkpoint.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(straight.join("checkpoint.bin")).unwrap(),
        fs::read(rest.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn divergence_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let cfg = write_config(dir.path(), 1e200);
    let o = relcon(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = relcon(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
