use super::instance::SentenceInstance;
use super::labels::LabelDictionary;
use super::markers::{insert_entity_markers, label_sequence, MarkedSequence};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Marked sentences plus the label sequence of every relation, ready for
/// batching or embedding.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub sentences: Vec<MarkedSequence>,
    pub relations: Vec<String>,
    pub label_sequences: BTreeMap<String, Vec<usize>>,
}

impl PreparedCorpus {
    pub fn new(
        instances: &[SentenceInstance],
        labels: &LabelDictionary,
        vocab: &Vocab,
        max_seq_len: usize,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InsufficientData("no sentences".into()));
        }
        let mut sentences = Vec::with_capacity(instances.len());
        let mut relations = Vec::with_capacity(instances.len());
        for s in instances {
            labels.require(&s.relation_id)?;
            sentences.push(insert_entity_markers(s, max_seq_len)?);
            relations.push(s.relation_id.clone());
        }
        let label_sequences = labels
            .entries()
            .iter()
            .map(|e| Ok((e.relation_id.clone(), label_sequence(e, vocab, max_seq_len)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            sentences,
            relations,
            label_sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}
