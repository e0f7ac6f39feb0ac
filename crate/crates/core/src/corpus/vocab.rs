use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const BLANK: usize = 5;
pub const E1_START: usize = 6;
pub const E1_END: usize = 7;
pub const E2_START: usize = 8;
pub const E2_END: usize = 9;

/// Reserved tokens in id order. They always occupy ids `0..RESERVED.len()`.
pub const RESERVED: [&str; 10] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BLANK]", "[E1s]", "[E1e]", "[E2s]", "[E2e]",
];

pub const MARKERS: [usize; 4] = [E1_START, E1_END, E2_START, E2_END];

/// Token/id bijection. Reserved ids precede every learned id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    reserved: Vec<String>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds from learned tokens (reserved ones are prepended).
    pub fn from_learned<I, S>(learned: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(learned.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i < RESERVED.len() && t != RESERVED[i] {
                return Err(Error::parse(
                    "vocab",
                    format!("id {i} must be reserved token {}, found `{t}`", RESERVED[i]),
                ));
            }
            if t.is_empty() {
                return Err(Error::parse("vocab", format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::parse("vocab", format!("duplicate token `{t}`")));
            }
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::parse("vocab", "reserved tokens missing"));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens in id order, reserved ones first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Reserved tokens that MLM never selects and label mean-pooling skips
    /// where relevant. `[UNK]` is deliberately not special.
    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len() && id != UNK
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            reserved: RESERVED.iter().map(|s| s.to_string()).collect(),
            tokens: self.tokens.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s).map_err(|e| Error::parse("vocab", e))?;
        if file.reserved != RESERVED {
            return Err(Error::parse(
                "vocab",
                format!("reserved list {:?} differs from {:?}", file.reserved, RESERVED),
            ));
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::Error::read_file(path.as_ref())?)
    }
}

/// Counts tokens over `sequences` and keeps those seen at least `min_count`
/// times, most frequent first (ties broken lexicographically).
pub fn build_vocab<'a, I>(sequences: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for seq in sequences {
        any = true;
        for t in seq {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::InsufficientData("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_learned(kept.into_iter().map(|(t, _)| t.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn threshold_maps_rare_tokens_to_unk() {
        let seqs = [toks("a b a")];
        let v = build_vocab(seqs.iter().map(Vec::as_slice), 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("a"), RESERVED.len());
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let seqs = [toks("a b a"), toks("c")];
        let v = build_vocab(seqs.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 3);
        for t in ["a", "b", "c"] {
            assert!(v.contains(t));
            assert!(v.id(t) >= RESERVED.len());
        }
    }

    #[test]
    fn json_round_trip() {
        let seqs = [toks("x y z y")];
        let v = build_vocab(seqs.iter().map(Vec::as_slice), 1).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(back.id(t), i);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let seqs: [Vec<String>; 0] = [];
        assert!(build_vocab(seqs.iter().map(Vec::as_slice), 1).is_err());
    }

    #[test]
    fn bad_files_rejected() {
        assert!(Vocab::from_json("{}").is_err());
        assert!(Vocab::from_json(r#"{"reserved":[],"tokens":[]}"#).is_err());
        let mut v: serde_json::Value =
            serde_json::from_str(&Vocab::from_learned(["a"]).unwrap().to_json().unwrap()).unwrap();
        v["tokens"].as_array_mut().unwrap().push("a".into());
        assert!(Vocab::from_json(&v.to_string()).is_err());
    }
}
