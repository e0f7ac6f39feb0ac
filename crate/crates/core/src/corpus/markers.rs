use super::instance::SentenceInstance;
use super::labels::LabelEntry;
use super::vocab::{Vocab, BLANK, CLS, E1_END, E1_START, E2_END, E2_START, SEP};
use crate::error::{Error, Result};

/// A sentence wrapped in `[CLS] ... [SEP]` with entity markers inserted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub tokens: Vec<usize>,
    pub pos_e1s: usize,
    pub pos_e2s: usize,
}

impl MarkedSequence {
    /// Positions of the four markers, `[E1s, E1e, E2s, E2e]`, if each occurs exactly once.
    pub fn marker_positions(&self) -> Option<[usize; 4]> {
        let mut pos = [usize::MAX; 4];
        for (i, &t) in self.tokens.iter().enumerate() {
            let slot = match t {
                E1_START => 0,
                E1_END => 1,
                E2_START => 2,
                E2_END => 3,
                _ => continue,
            };
            if pos[slot] != usize::MAX {
                return None;
            }
            pos[slot] = i;
        }
        pos.iter().all(|&p| p != usize::MAX).then_some(pos)
    }

    pub fn is_valid(&self) -> bool {
        match self.marker_positions() {
            Some([s1, e1, s2, e2]) => {
                s1 < e1
                    && s2 < e2
                    && (e1 < s2 || e2 < s1)
                    && s1 == self.pos_e1s
                    && s2 == self.pos_e2s
                    && self.tokens.first() == Some(&CLS)
                    && self.tokens.last() == Some(&SEP)
            }
            None => false,
        }
    }
}

/// Wraps the sentence as `[CLS] ... [E1s] head [E1e] ... [E2s] tail [E2e] ... [SEP]`
/// (markers follow the original entity order). Overlong sequences lose
/// trailing tokens before `[SEP]`; if a marker would be cut the instance is
/// rejected.
pub fn insert_entity_markers(s: &SentenceInstance, max_seq_len: usize) -> Result<MarkedSequence> {
    super::instance::validate_spans(
        || format!("instance {}", s.index),
        s.tokens.len(),
        &s.head_span,
        &s.tail_span,
    )?;
    let mut tokens = Vec::with_capacity(s.tokens.len() + 6);
    tokens.push(CLS);
    let (mut pos_e1s, mut pos_e2s, mut last_marker) = (0, 0, 0);
    for (i, &t) in s.tokens.iter().enumerate() {
        if i == s.head_span.start {
            pos_e1s = tokens.len();
            tokens.push(E1_START);
        }
        if i == s.tail_span.start {
            pos_e2s = tokens.len();
            tokens.push(E2_START);
        }
        tokens.push(t);
        if i + 1 == s.head_span.end {
            last_marker = tokens.len();
            tokens.push(E1_END);
        }
        if i + 1 == s.tail_span.end {
            last_marker = tokens.len();
            tokens.push(E2_END);
        }
    }
    if tokens.len() + 1 > max_seq_len {
        let needed = last_marker + 2;
        if needed > max_seq_len {
            return Err(Error::MarkersDoNotFit {
                instance: format!("instance {}", s.index),
                needed,
                max: max_seq_len,
            });
        }
        tokens.truncate(max_seq_len - 1);
    }
    tokens.push(SEP);
    Ok(MarkedSequence {
        tokens,
        pos_e1s,
        pos_e2s,
    })
}

/// `[CLS] label : description [SEP]`, truncated to `max_seq_len`.
pub fn label_sequence(entry: &LabelEntry, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<usize>> {
    if max_seq_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_seq_len {max_seq_len} cannot hold a label sequence"
        )));
    }
    let mut out = vec![CLS];
    out.extend(vocab.encode(&entry.tokens()).into_iter().take(max_seq_len - 2));
    out.push(SEP);
    Ok(out)
}

/// Replaces entity spans with a single `[BLANK]`. The head decision is drawn
/// before the tail decision; each is `true` with probability `rho`.
pub fn blank_spans(m: &MarkedSequence, blank_head: bool, blank_tail: bool) -> MarkedSequence {
    let mut tokens = Vec::with_capacity(m.tokens.len());
    let mut inside: Option<bool> = None;
    let (mut pos_e1s, mut pos_e2s) = (m.pos_e1s, m.pos_e2s);
    for &t in &m.tokens {
        match t {
            E1_START | E2_START => {
                let blank = if t == E1_START { blank_head } else { blank_tail };
                if t == E1_START {
                    pos_e1s = tokens.len();
                } else {
                    pos_e2s = tokens.len();
                }
                tokens.push(t);
                if blank {
                    tokens.push(BLANK);
                }
                inside = Some(blank);
            }
            E1_END | E2_END => {
                inside = None;
                tokens.push(t);
            }
            _ => {
                if inside != Some(true) {
                    tokens.push(t);
                }
            }
        }
    }
    MarkedSequence {
        tokens,
        pos_e1s,
        pos_e2s,
    }
}
