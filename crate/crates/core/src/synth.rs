//! Synthetic relation corpus with a known, tunable signal.
//!
//! Relation `r` owns `relation_signal` tokens no other relation uses. A
//! sentence is a shuffle of signal tokens (drawn from its relation's set) and
//! filler tokens, with a one-token head and tail entity inserted at random
//! positions.

use crate::corpus::{CorpusRecord, LabelFile, RawLabel, RawSentence, SpanRecord};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_relations: usize,
    pub instances_per_relation: usize,
    pub vocab_size: usize,
    /// Relation-specific context tokens per sentence.
    pub relation_signal: usize,
    /// Random filler tokens per sentence.
    pub noise_tokens: usize,
    /// The first this many relations form the pre-training split.
    pub n_train_relations: usize,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_relations: 20,
            instances_per_relation: 50,
            vocab_size: 2000,
            relation_signal: 3,
            noise_tokens: 5,
            n_train_relations: 14,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let signal = self.n_relations * self.relation_signal;
        // Entities and fillers need a pool of their own.
        if self.vocab_size <= signal + 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} leaves no filler tokens after {} signal tokens",
                self.vocab_size, signal
            )));
        }
        if self.n_relations == 0 || self.instances_per_relation == 0 {
            return Err(Error::InvalidArgument("empty synthetic corpus".into()));
        }
        if self.n_train_relations > self.n_relations {
            return Err(Error::InvalidArgument(format!(
                "n_train_relations {} exceeds n_relations {}",
                self.n_train_relations, self.n_relations
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_str(&Error::read_file(path.as_ref())?).map_err(|e| Error::parse("synth spec", e))
    }

    pub fn relation_id(r: usize) -> String {
        format!("R{r:02}")
    }

    fn word(i: usize) -> String {
        format!("w{i:04}")
    }

    /// Signal words of relation `r`.
    pub fn signal_words(&self, r: usize) -> Vec<String> {
        (r * self.relation_signal..(r + 1) * self.relation_signal)
            .map(Self::word)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub records: Vec<CorpusRecord>,
    pub labels: LabelFile,
    pub train_relations: Vec<String>,
    pub heldout_relations: Vec<String>,
}

impl SynthCorpus {
    pub fn train_records(&self) -> Vec<CorpusRecord> {
        self.split(&self.train_relations)
    }

    pub fn heldout_records(&self) -> Vec<CorpusRecord> {
        self.split(&self.heldout_relations)
    }

    fn split(&self, relations: &[String]) -> Vec<CorpusRecord> {
        self.records
            .iter()
            .filter(|r| relations.contains(&r.relation_id))
            .cloned()
            .collect()
    }

    /// Writes `corpus.jsonl`, `train.jsonl`, `heldout.jsonl` and `labels.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let jsonl = |records: &[CorpusRecord]| -> Result<String> {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            Ok(out)
        };
        std::fs::write(dir.join("corpus.jsonl"), jsonl(&self.records)?)?;
        std::fs::write(dir.join("train.jsonl"), jsonl(&self.train_records())?)?;
        std::fs::write(dir.join("heldout.jsonl"), jsonl(&self.heldout_records())?)?;
        std::fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&self.labels)?)?;
        Ok(())
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let first_filler = spec.n_relations * spec.relation_signal;
    let mut records = Vec::with_capacity(spec.n_relations * spec.instances_per_relation);
    let mut labels = LabelFile::new();
    for r in 0..spec.n_relations {
        let rel = SynthSpec::relation_id(r);
        let signal = spec.signal_words(r);
        let (label, description) = if signal.is_empty() {
            (format!("relation r{r}"), format!("relation r{r} between two entities"))
        } else {
            let mut desc: Vec<&str> = vec!["relation", "expressed", "by"];
            desc.extend(signal.iter().rev().map(String::as_str));
            (signal.join(" "), desc.join(" "))
        };
        labels.insert(rel.clone(), RawLabel { label, description });
        for k in 0..spec.instances_per_relation {
            let mut rng = derive(spec.rng_seed, Stream::Synth, &[r as u64, k as u64]);
            let mut filler = || SynthSpec::word(rng.gen_range(first_filler..spec.vocab_size));
            let head = filler();
            let tail = filler();
            let mut words: Vec<String> = (0..spec.noise_tokens).map(|_| filler()).collect();
            words.extend((0..spec.relation_signal).map(|_| signal[rng.gen_range(0..signal.len())].clone()));
            words.shuffle(&mut rng);
            let len = words.len() + 2;
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(&mut rng);
            let (hp, tp) = (slots[0], slots[1]);
            let mut rest = words.into_iter();
            let tokens: Vec<String> = (0..len)
                .map(|i| {
                    if i == hp {
                        head.clone()
                    } else if i == tp {
                        tail.clone()
                    } else {
                        rest.next().expect("enough words")
                    }
                })
                .collect();
            records.push(CorpusRecord {
                text: tokens.join(" "),
                head: SpanRecord { start: hp, end: hp + 1 },
                tail: SpanRecord { start: tp, end: tp + 1 },
                relation_id: rel.clone(),
            });
        }
    }
    let ids: Vec<String> = (0..spec.n_relations).map(SynthSpec::relation_id).collect();
    let (train, heldout) = ids.split_at(spec.n_train_relations);
    Ok(SynthCorpus {
        records,
        labels,
        train_relations: train.to_vec(),
        heldout_relations: heldout.to_vec(),
    })
}

fn counts(s: &RawSentence) -> HashMap<&str, f64> {
    let mut m: HashMap<&str, f64> = HashMap::new();
    for t in &s.tokens {
        *m.entry(t.as_str()).or_default() += 1.0;
    }
    m
}

/// Bag-of-words nearest-centroid accuracy: for every relation the first half of
/// its sentences form a raw-count centroid, the second half are classified by
/// cosine to the centroids. Used to show a dataset is learnable.
pub fn bow_centroid_accuracy(sentences: &[RawSentence]) -> f64 {
    let mut by_rel: Vec<(&str, Vec<&RawSentence>)> = Vec::new();
    for s in sentences {
        match by_rel.iter_mut().find(|(r, _)| *r == s.relation_id) {
            Some((_, v)) => v.push(s),
            None => by_rel.push((&s.relation_id, vec![s])),
        }
    }
    let norm = |m: &HashMap<&str, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    let mut centroids = Vec::new();
    for (_, v) in &by_rel {
        let mut c: HashMap<&str, f64> = HashMap::new();
        for s in &v[..v.len() / 2] {
            for (t, x) in counts(s) {
                *c.entry(t).or_default() += x;
            }
        }
        centroids.push(c);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (truth, (_, v)) in by_rel.iter().enumerate() {
        for s in &v[v.len() / 2..] {
            let q = counts(s);
            let qn = norm(&q);
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let dot: f64 = q.iter().map(|(t, x)| x * c.get(t).copied().unwrap_or(0.0)).sum();
                let score = dot / (qn * norm(c)).max(f64::MIN_POSITIVE);
                if score > best.0 {
                    best = (score, j);
                }
            }
            correct += usize::from(best.1 == truth);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}
