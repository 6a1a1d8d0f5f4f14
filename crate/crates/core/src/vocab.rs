//! Token ↔ index mapping with four reserved slots.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};
use crate::io::{read_text, write_atomic};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase and split on whitespace. Punctuation stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        for (i, name) in RESERVED.iter().enumerate() {
            if entries.get(i).map(|e| e.token.as_str()) != Some(*name) {
                return Err(FaeError::Input(format!(
                    "vocabulary slot {i} must hold {name}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), i).is_some() {
                return Err(FaeError::Input(format!("duplicate vocabulary token {:?}", e.token)));
            }
        }
        Ok(Vocabulary { entries, index })
    }

    /// Counts every token across `texts` and keeps those seen at least
    /// `min_count` times, most frequent first, ties in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let entries = RESERVED
            .iter()
            .map(|t| VocabEntry {
                token: t.to_string(),
                count: 0,
            })
            .chain(kept.into_iter().map(|(token, count)| VocabEntry { token, count }))
            .collect();
        Vocabulary::from_entries(entries).expect("reserved prefix is always present")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.token.as_str())
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Maps tokens to indices and appends `<eos>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index_of(t.as_ref()))
            .chain(std::iter::once(EOS))
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text))
    }

    /// Inverse of [`encode`](Self::encode); `<pad>`, `<bos>` and `<eos>` are
    /// dropped, `<unk>` is kept so the output length stays honest.
    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| FaeError::Input(format!("token index {i} out of range ({})", self.len())))
            })
            .collect()
    }

    pub fn decode_text(&self, indices: &[usize]) -> Result<String> {
        Ok(self.decode(indices)?.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.entries).expect("vocab serializes");
        write_atomic(path, format!("{body}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let entries: Vec<VocabEntry> = serde_json::from_str(&text).map_err(|e| FaeError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Vocabulary::from_entries(entries)
    }
}
