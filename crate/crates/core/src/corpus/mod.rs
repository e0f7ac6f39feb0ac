//! Corpus and label ingestion plus text-level preprocessing: vocabulary,
//! entity markers, blank masking and MLM masking.

pub mod instance;
pub mod labels;
pub mod markers;
pub mod masking;
pub mod prepared;
pub mod tokenize;
pub mod vocab;

pub use instance::{
    check_label_totality, load_corpus, parse_corpus, parse_corpus_line, CorpusRecord, RawSentence,
    SentenceInstance, SpanRecord,
};
pub use labels::{
    build_label_dictionary, load_label_file, parse_label_file, LabelDictionary, LabelEntry,
    LabelFile, RawLabel,
};
pub use markers::{insert_entity_markers, label_sequence, MarkedSequence};
pub use masking::{apply_blank_masking, apply_mlm_masking, MlmMasked, PreprocessConfig};
pub use prepared::PreparedCorpus;
pub use tokenize::tokenize;
pub use vocab::{build_vocab, Vocab};

/// Vocabulary over every sentence and every label sequence supplied.
pub fn build_corpus_vocab(
    corpora: &[&[RawSentence]],
    labels: &LabelDictionary,
    min_count: usize,
) -> crate::Result<Vocab> {
    let label_tokens: Vec<Vec<String>> = labels.entries().iter().map(LabelEntry::tokens).collect();
    let seqs = corpora
        .iter()
        .flat_map(|c| c.iter().map(|s| s.tokens.as_slice()))
        .chain(label_tokens.iter().map(Vec::as_slice));
    build_vocab(seqs, min_count)
}
