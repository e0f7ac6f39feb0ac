//! The checked-in fuzz seeds are valid inputs, and every parser accepts them.

use relcon::config::RunConfig;
use relcon::corpus::instance::{parse_corpus, parse_corpus_line};
use relcon::corpus::labels::parse_label_file;
use relcon::corpus::vocab::Vocab;
use relcon::tensor::Checkpoint;
use relcon::training::{load_model, Trainer};
use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out.sort();
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn corpus_seeds_parse() {
    for (p, b) in seeds("corpus_line") {
        let sentences = parse_corpus(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        if sentences.len() == 1 {
            parse_corpus_line(text(&b), 1).unwrap();
        }
    }
}

#[test]
fn label_seeds_parse() {
    for (p, b) in seeds("label_file") {
        parse_label_file(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn vocab_seeds_round_trip() {
    for (p, b) in seeds("vocab_json") {
        let v = Vocab::from_json(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(Vocab::from_json(&v.to_json().unwrap()).unwrap(), v);
    }
}

#[test]
fn checkpoint_seeds_restore() {
    for (p, b) in seeds("checkpoint") {
        let ck = Checkpoint::from_bytes(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        load_model(&ck).unwrap();
        Trainer::restore(&ck).unwrap();
    }
}

#[test]
fn config_seeds_parse() {
    for (p, b) in seeds("run_config") {
        RunConfig::parse(text(&b))
            .and_then(|c| c.validate())
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let (_, b) = &seeds("checkpoint")[0];
    for cut in [0, 4, 8, 9, b.len() / 2, b.len() - 1] {
        assert!(Checkpoint::from_bytes(&b[..cut]).is_err(), "cut at {cut}");
    }
}
