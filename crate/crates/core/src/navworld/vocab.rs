use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>"];
pub const GRAMMAR_TOKENS: [&str; 4] = ["go", "to", "then", "stop"];

pub fn is_special(id: usize) -> bool {
    id <= EOS
}

/// Token inventory. Special tokens occupy ids 0..=4, followed by the grammar
/// words, the colour words and the object words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build(colors: &[String], objects: &[String]) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .chain(GRAMMAR_TOKENS.iter())
            .map(|s| s.to_string())
            .chain(colors.iter().cloned())
            .chain(objects.iter().cloned())
            .collect();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unknown words map to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list; stored in agent
    /// checkpoints to catch vocabulary drift.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
