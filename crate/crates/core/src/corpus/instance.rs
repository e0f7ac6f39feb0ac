use super::labels::LabelDictionary;
use super::tokenize::tokenize;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
}

/// One line of a corpus file. Offsets index tokens of `text` after tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub text: String,
    pub head: SpanRecord,
    pub tail: SpanRecord,
    pub relation_id: String,
}

/// A tokenized sentence before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSentence {
    pub tokens: Vec<String>,
    pub head_span: Range<usize>,
    pub tail_span: Range<usize>,
    pub relation_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceInstance {
    /// Position in the source corpus, used in diagnostics.
    pub index: usize,
    pub tokens: Vec<usize>,
    pub head_span: Range<usize>,
    pub tail_span: Range<usize>,
    pub relation_id: String,
}

pub(crate) fn validate_spans(
    name: impl Fn() -> String,
    len: usize,
    head: &Range<usize>,
    tail: &Range<usize>,
) -> Result<()> {
    let bad = |detail: String| Error::InvalidSpan {
        instance: name(),
        detail,
    };
    for (what, s) in [("head", head), ("tail", tail)] {
        if s.start >= s.end {
            return Err(bad(format!("{what} span {s:?} is empty")));
        }
        if s.end > len {
            return Err(bad(format!("{what} span {s:?} exceeds {len} tokens")));
        }
    }
    if head.start < tail.end && tail.start < head.end {
        return Err(bad(format!("head {head:?} overlaps tail {tail:?}")));
    }
    Ok(())
}

impl CorpusRecord {
    pub fn to_raw(&self, line: usize) -> Result<RawSentence> {
        if self.relation_id.is_empty() {
            return Err(Error::parse("corpus line", format!("line {line}: empty relation_id")));
        }
        let tokens = tokenize(&self.text);
        let head = self.head.start..self.head.end;
        let tail = self.tail.start..self.tail.end;
        validate_spans(|| format!("corpus line {line}"), tokens.len(), &head, &tail)?;
        Ok(RawSentence {
            tokens,
            head_span: head,
            tail_span: tail,
            relation_id: self.relation_id.clone(),
        })
    }
}

impl RawSentence {
    pub fn to_instance(&self, index: usize, vocab: &Vocab) -> SentenceInstance {
        SentenceInstance {
            index,
            tokens: vocab.encode(&self.tokens),
            head_span: self.head_span.clone(),
            tail_span: self.tail_span.clone(),
            relation_id: self.relation_id.clone(),
        }
    }
}

/// Parses one JSON line of a corpus file (`line` is 1-based, for messages).
pub fn parse_corpus_line(json: &str, line: usize) -> Result<RawSentence> {
    let rec: CorpusRecord = serde_json::from_str(json)
        .map_err(|e| Error::parse("corpus line", format!("line {line}: {e}")))?;
    rec.to_raw(line)
}

/// Parses a JSON-lines corpus; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<RawSentence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_corpus_line(l, i + 1))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RawSentence>> {
    parse_corpus(&Error::read_file(path.as_ref())?)
}

/// Fails on the first sentence whose relation has no label entry.
pub fn check_label_totality(sentences: &[RawSentence], labels: &LabelDictionary) -> Result<()> {
    for s in sentences {
        labels.require(&s.relation_id)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::labels::{build_label_dictionary, RawLabel};

    #[test]
    fn parses_a_line() {
        let s = parse_corpus_line(
            r#"{"text":"Entity1 was founded by Entity2","head":{"start":0,"end":1},"tail":{"start":4,"end":5},"relation_id":"P112"}"#,
            1,
        )
        .unwrap();
        assert_eq!(s.tokens.len(), 5);
        assert_eq!(s.head_span, 0..1);
        assert_eq!(s.relation_id, "P112");
    }

    #[test]
    fn invalid_spans_rejected() {
        let mk = |h: (usize, usize), t: (usize, usize)| {
            format!(
                r#"{{"text":"a b c d","head":{{"start":{},"end":{}}},"tail":{{"start":{},"end":{}}},"relation_id":"r"}}"#,
                h.0, h.1, t.0, t.1
            )
        };
        assert!(parse_corpus_line(&mk((0, 0), (1, 2)), 1).is_err());
        assert!(parse_corpus_line(&mk((0, 1), (3, 5)), 1).is_err());
        assert!(parse_corpus_line(&mk((0, 2), (1, 3)), 1).is_err());
        assert!(parse_corpus_line(&mk((2, 1), (0, 1)), 1).is_err());
        assert!(parse_corpus_line(&mk((0, 1), (1, 2)), 1).is_ok());
        assert!(parse_corpus_line("{", 1).is_err());
    }

    #[test]
    fn totality_check_names_missing_relation() {
        let labels = build_label_dictionary([(
            "r".to_string(),
            RawLabel {
                label: "rel".into(),
                description: "".into(),
            },
        )])
        .unwrap();
        let corpus = parse_corpus(
            "{\"text\":\"a b\",\"head\":{\"start\":0,\"end\":1},\"tail\":{\"start\":1,\"end\":2},\"relation_id\":\"r\"}\n\n\
             {\"text\":\"a b\",\"head\":{\"start\":0,\"end\":1},\"tail\":{\"start\":1,\"end\":2},\"relation_id\":\"q\"}",
        )
        .unwrap();
        let err = check_label_totality(&corpus, &labels).unwrap_err();
        assert!(matches!(err, Error::UnknownRelation(ref id) if id == "q"));
    }
}
