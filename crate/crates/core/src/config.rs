//! Run configuration file: one JSON object with a section per module.
//! Relative paths are resolved against the directory holding the file.

use crate::corpus::PreprocessConfig;
use crate::encoder::EncoderConfig;
use crate::episodes::{Similarity, TaskSpec};
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// JSON-lines corpus used for pre-training.
    pub train: PathBuf,
    /// Corpus of unseen relations for episodic evaluation.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Tokens rarer than this map to `[UNK]`.
    #[serde(default = "one")]
    pub min_count: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n: usize,
    pub k: usize,
    /// Queries per episode; defaults to `n`.
    pub t: Option<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub label_info: bool,
    pub similarity: Similarity,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n: 5,
            k: 1,
            t: None,
            episodes: 2000,
            seed: 7,
            label_info: false,
            similarity: Similarity::Cosine,
        }
    }
}

impl EvalSection {
    pub fn task(&self) -> TaskSpec {
        TaskSpec::new(self.n, self.k, self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    /// Label dictionary (JSON object keyed by relation id).
    pub labels: PathBuf,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::parse("run config", e))
    }

    /// Reads a config file and makes its paths absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&Error::read_file(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.train);
        if let Some(e) = self.corpus.eval.as_mut() {
            fix(e);
        }
        fix(&mut self.labels);
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.preprocess.validate()?;
        if self.preprocess.max_seq_len > self.encoder.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "preprocess max_seq_len {} exceeds encoder max_seq_len {}",
                self.preprocess.max_seq_len, self.encoder.max_seq_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(r#"{"corpus": {"train": "t.jsonl"}, "labels": "l.json"}"#).unwrap();
        assert_eq!(cfg.corpus.min_count, 1);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval.task(), TaskSpec::new(5, 1, Some(5)));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            r#"{"corpus": {"train": "t"}, "labels": "l", "extra": 1}"#,
            r#"{"corpus": {"train": "t", "dev": "d"}, "labels": "l"}"#,
            r#"{"corpus": {"train": "t"}, "labels": "l", "train": {"lr_decay": 1}}"#,
            r#"{"corpus": {"train": "t"}, "labels": "l", "encoder": {"dim": 8}}"#,
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut cfg = RunConfig::parse(
            r#"{"corpus": {"train": "t.jsonl", "eval": "/abs/e.jsonl"}, "labels": "l.json"}"#,
        )
        .unwrap();
        cfg.resolve(Path::new("/runs/a"));
        assert_eq!(cfg.corpus.train, Path::new("/runs/a/t.jsonl"));
        assert_eq!(cfg.corpus.eval.as_deref(), Some(Path::new("/abs/e.jsonl")));
        assert_eq!(cfg.labels, Path::new("/runs/a/l.json"));
    }
}
