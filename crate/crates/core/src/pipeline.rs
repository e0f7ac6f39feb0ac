//! Glue between files on disk and the modules: loading a run's data,
//! embedding a corpus with a trained model, metrics and export rows.

use crate::config::RunConfig;
use crate::corpus::{
    build_corpus_vocab, build_label_dictionary, check_label_totality, load_corpus, load_label_file,
    CorpusRecord, LabelDictionary, PreparedCorpus, RawSentence, Vocab,
};
use crate::encoder::BiEncoder;
use crate::episodes::EmbeddedCorpus;
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, EmbeddingKind, ExportRow, MetricsReport};
use crate::synth::SynthCorpus;
use std::path::Path;

/// Everything `pretrain` needs, with the vocabulary built from the data.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocab,
    pub labels: LabelDictionary,
    pub train: PreparedCorpus,
    pub eval: Option<PreparedCorpus>,
}

pub fn prepare(
    sentences: &[RawSentence],
    labels: &LabelDictionary,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<PreparedCorpus> {
    check_label_totality(sentences, labels)?;
    let instances: Vec<_> = sentences.iter().enumerate().map(|(i, s)| s.to_instance(i, vocab)).collect();
    PreparedCorpus::new(&instances, labels, vocab, max_seq_len)
}

/// Loads the corpora and labels of `cfg`; the vocabulary covers both corpora
/// and every label text.
pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let labels = load_label_file(&cfg.labels)?;
    let train = load_corpus(&cfg.corpus.train)?;
    let eval = cfg.corpus.eval.as_ref().map(load_corpus).transpose()?;
    let mut corpora: Vec<&[RawSentence]> = vec![&train];
    if let Some(e) = &eval {
        corpora.push(e);
    }
    let vocab = build_corpus_vocab(&corpora, &labels, cfg.corpus.min_count)?;
    let max = cfg.preprocess.max_seq_len;
    Ok(RunData {
        train: prepare(&train, &labels, &vocab, max)?,
        eval: eval.map(|e| prepare(&e, &labels, &vocab, max)).transpose()?,
        vocab,
        labels,
    })
}

/// Loads a corpus with an existing vocabulary, e.g. one stored in a checkpoint.
pub fn load_with_vocab(
    corpus: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<PreparedCorpus> {
    let labels = load_label_file(labels)?;
    prepare(&load_corpus(corpus)?, &labels, vocab, max_seq_len)
}

/// Alignment of every sentence with its gold label, and uniformity of the
/// sentence set and of the label set of relations present in the corpus.
pub fn corpus_metrics(model: &BiEncoder, corpus: &PreparedCorpus, seed: u64) -> Result<MetricsReport> {
    embedded_metrics(&EmbeddedCorpus::new(model, corpus)?, seed)
}

pub fn embedded_metrics(e: &EmbeddedCorpus, seed: u64) -> Result<MetricsReport> {
    let index = e.index();
    let present: Vec<&str> = index.relations().collect();
    let labels = present
        .iter()
        .map(|r| Ok(e.labels.get(*r).ok_or_else(|| Error::UnknownRelation(r.to_string()))?.as_slice()))
        .collect::<Result<Vec<&[f64]>>>()?;
    let label_of: Vec<usize> = e
        .relations
        .iter()
        .map(|r| present.iter().position(|p| p == r).expect("index covers every relation"))
        .collect();
    let sentences: Vec<&[f64]> = e.sentences.iter().map(|s| s.as_slice()).collect();
    metrics_report(&sentences, &labels, &label_of, seed)
}

/// Export rows for the listed relations: every sentence, then the label.
pub fn export_rows<'a>(e: &'a EmbeddedCorpus, relations: &'a [String]) -> Result<Vec<ExportRow<'a>>> {
    let mut rows = Vec::new();
    for r in relations {
        let label = e.labels.get(r).ok_or_else(|| Error::UnknownRelation(r.clone()))?;
        let mut found = false;
        for (i, rel) in e.relations.iter().enumerate() {
            if rel == r {
                found = true;
                rows.push(ExportRow {
                    kind: EmbeddingKind::Sentence,
                    relation_id: r,
                    values: e.sentences[i].as_slice(),
                });
            }
        }
        if !found {
            return Err(Error::InvalidArgument(format!("relation {r} has no sentences in the corpus")));
        }
        rows.push(ExportRow {
            kind: EmbeddingKind::Label,
            relation_id: r,
            values: label.as_slice(),
        });
    }
    Ok(rows)
}

/// A generated corpus prepared for training and evaluation, with one shared
/// vocabulary.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub vocab: Vocab,
    pub labels: LabelDictionary,
    pub train: PreparedCorpus,
    /// Relations held out from training; `None` when every relation trains.
    pub heldout: Option<PreparedCorpus>,
    pub all: PreparedCorpus,
}

pub fn prepare_synth(c: &SynthCorpus, max_seq_len: usize) -> Result<SynthData> {
    let raw = |records: &[CorpusRecord]| -> Result<Vec<RawSentence>> {
        records.iter().enumerate().map(|(i, r)| r.to_raw(i + 1)).collect()
    };
    let labels = build_label_dictionary(c.labels.clone())?;
    let train = raw(&c.train_records())?;
    let heldout = raw(&c.heldout_records())?;
    let vocab = build_corpus_vocab(&[&train, &heldout], &labels, 1)?;
    let all = raw(&c.records)?;
    Ok(SynthData {
        train: prepare(&train, &labels, &vocab, max_seq_len)?,
        heldout: if heldout.is_empty() {
            None
        } else {
            Some(prepare(&heldout, &labels, &vocab, max_seq_len)?)
        },
        all: prepare(&all, &labels, &vocab, max_seq_len)?,
        vocab,
        labels,
    })
}
