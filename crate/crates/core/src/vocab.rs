use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::annotation::UNK;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Token-to-id table with fixed special tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    /// Specials followed by `words` in first-seen order.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, mapping unknown words to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Class labels; id 0 is reserved for unseen labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for ClassVocab {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        ClassVocab { labels, index }
    }
}

impl From<ClassVocab> for Vec<String> {
    fn from(v: ClassVocab) -> Self {
        v.labels
    }
}

impl ClassVocab {
    pub fn new<S: AsRef<str>>(labels: impl IntoIterator<Item = S>) -> Self {
        let mut all = vec![UNK.to_string()];
        for l in labels {
            if !all.iter().any(|t| t == l.as_ref()) {
                all.push(l.as_ref().to_string());
            }
        }
        ClassVocab::from(all)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(0)
    }

    pub fn label(&self, id: usize) -> &str {
        self.labels.get(id).map_or(UNK, String::as_str)
    }
}
