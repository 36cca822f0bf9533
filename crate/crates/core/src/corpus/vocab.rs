use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token <-> id map. Ids below [`NUM_SPECIAL`] are reserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Vocab::new();
        for t in tokens.into_iter().skip(NUM_SPECIAL) {
            v.insert(&t);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self {
            tokens: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    /// Returns the id of `token`, adding it when unseen.
    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Id of `token`, or [`UNK`] when it was never inserted.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Hex digest over the ordered token list; checkpoints use it to detect
    /// a vocabulary that no longer matches the embedding table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_is_zero_and_ids_are_stable() {
        let mut v = Vocab::new();
        assert_eq!(v.token(PAD), Some("<pad>"));
        let a = v.insert("alpha");
        assert_eq!(a as usize, NUM_SPECIAL);
        assert_eq!(v.insert("alpha"), a);
        assert_eq!(v.lookup("beta"), UNK);
        assert_eq!(v.token(a), Some("alpha"));
    }

    #[test]
    fn serde_round_trip_keeps_hash() {
        let mut v = Vocab::new();
        for t in ["x", "y", "z"] {
            v.insert(t);
        }
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
