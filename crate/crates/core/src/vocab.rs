//! Token vocabulary with PAD/UNK/SEP specials.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::document::Document;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab { tokens, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    /// Collect the token set of a corpus, sorted for determinism.
    pub fn build(docs: &[Document]) -> Self {
        let set: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.segments.iter())
            .flat_map(|s| s.tokens.iter())
            .map(|t| t.as_str())
            .collect();
        let mut tokens = vec!["[PAD]".to_string(), "[UNK]".to_string(), SEP_TOKEN.to_string()];
        tokens.extend(set.into_iter().map(|s| s.to_string()));
        Vocab::from_tokens(tokens)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::from_tokens(vec!["[PAD]".into(), "[UNK]".into(), "[SEP]".into(), "a".into()]);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("[SEP]"), SEP);
    }
}
