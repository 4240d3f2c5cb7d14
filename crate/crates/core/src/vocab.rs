//! Token id ↔ string mapping.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_special, N_SPECIAL, UNK};

pub const SPECIAL_TOKENS: [&str; N_SPECIAL as usize] = ["<bos>", "<eos>", "<pad>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// First four tokens must be the special tokens, in id order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Parse(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by `t4`, `t5`, … up to `size`.
    pub fn synthetic(size: usize) -> Self {
        let tokens = (0..size)
            .map(|i| match SPECIAL_TOKENS.get(i) {
                Some(s) => s.to_string(),
                None => format!("t{i}"),
            })
            .collect();
        Self::new(tokens).expect("synthetic vocabulary is well formed")
    }

    /// One token per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Whitespace-separated words to ids; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Non-special tokens joined by spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rebuild the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_round_trip() {
        let v = Vocabulary::synthetic(8);
        assert_eq!(v.token(0), "<bos>");
        assert_eq!(v.token(5), "t5");
        assert_eq!(v.encode("t4 t7 nope"), vec![4, 7, UNK]);
        assert_eq!(v.decode(&[0, 4, 7, 1]), "t4 t7");
    }

    #[test]
    fn rejects_missing_specials_and_duplicates() {
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::parse("<bos>\n<eos>\n<pad>\n<unk>\nx\nx\n").is_err());
        assert_eq!(
            Vocabulary::parse("<bos>\n<eos>\n<pad>\n<unk>\nx\n")
                .unwrap()
                .id("x"),
            Some(4)
        );
    }
}
