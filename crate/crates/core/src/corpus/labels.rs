use super::tokenize::tokenize;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Token placed between the label text and its description.
pub const LABEL_SEPARATOR: &str = ":";

/// A raw label record as found in the label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLabel {
    pub label: String,
    pub description: String,
}

/// The label file: relation id mapped to its label and description.
pub type LabelFile = BTreeMap<String, RawLabel>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub relation_id: String,
    pub label_text: Vec<String>,
    pub description: Vec<String>,
}

impl LabelEntry {
    /// Label tokens, the separator, then description tokens.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = self.label_text.clone();
        out.push(LABEL_SEPARATOR.to_string());
        out.extend(self.description.iter().cloned());
        out
    }

    /// `"label: description"`.
    pub fn text_form(&self) -> String {
        format!(
            "{}{} {}",
            self.label_text.join(" "),
            LABEL_SEPARATOR,
            self.description.join(" ")
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelDictionary {
    entries: Vec<LabelEntry>,
    index: HashMap<String, usize>,
}

impl LabelDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, relation_id: &str) -> Option<&LabelEntry> {
        self.index.get(relation_id).map(|&i| &self.entries[i])
    }

    pub fn require(&self, relation_id: &str) -> Result<&LabelEntry> {
        self.get(relation_id)
            .ok_or_else(|| Error::UnknownRelation(relation_id.to_string()))
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.relation_id.as_str())
    }
}

/// Builds the dictionary from `(relation_id, record)` pairs, in order.
pub fn build_label_dictionary<I>(records: I) -> Result<LabelDictionary>
where
    I: IntoIterator<Item = (String, RawLabel)>,
{
    let mut dict = LabelDictionary::default();
    for (relation_id, raw) in records {
        if relation_id.is_empty() {
            return Err(Error::parse("label file", "empty relation id"));
        }
        if dict.index.contains_key(&relation_id) {
            return Err(Error::DuplicateRelation(relation_id));
        }
        let label_text = tokenize(&raw.label);
        if label_text.is_empty() {
            return Err(Error::EmptyLabel(relation_id));
        }
        dict.index.insert(relation_id.clone(), dict.entries.len());
        dict.entries.push(LabelEntry {
            relation_id,
            label_text,
            description: tokenize(&raw.description),
        });
    }
    Ok(dict)
}

pub fn parse_label_file(json: &str) -> Result<LabelDictionary> {
    let file: LabelFile = serde_json::from_str(json).map_err(|e| Error::parse("label file", e))?;
    build_label_dictionary(file)
}

pub fn load_label_file(path: impl AsRef<Path>) -> Result<LabelDictionary> {
    parse_label_file(&Error::read_file(path.as_ref())?)
}
