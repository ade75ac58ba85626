// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabulary and tokenizer.
//!
//! Text is split into alphanumeric runs and single punctuation characters;
//! whitespace only separates. Lookup is case sensitive with a lowercase
//! fallback, then `<unk>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
/// Placeholder token occupying visual positions.
pub const IMAGE: &str = "<img>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Synthetic `t0 .. t{n-1}` vocabulary with the special tokens up front.
    pub fn numbered(n: usize) -> Self {
        let mut tokens: Vec<String> = [BOS, EOS, UNK, IMAGE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        while tokens.len() < n {
            tokens.push(format!("t{}", tokens.len()));
        }
        tokens.truncate(n);
        Self::new(tokens).expect("numbered vocabulary is unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.id(BOS)
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.id(EOS)
    }

    pub fn image(&self) -> Option<TokenId> {
        self.id(IMAGE)
    }

    fn lookup(&self, word: &str) -> TokenId {
        self.id(word)
            .or_else(|| self.id(&word.to_lowercase()))
            .or_else(|| self.id(UNK))
            .unwrap_or(0)
    }

    /// Splits `text` into surface pieces without mapping them to ids.
    pub fn split(text: &str) -> Vec<&str> {
        let mut pieces = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() || c == '\'' {
                start.get_or_insert(i);
                continue;
            }
            if let Some(s) = start.take() {
                pieces.push(&text[s..i]);
            }
            if !c.is_whitespace() {
                pieces.push(&text[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            pieces.push(&text[s..]);
        }
        pieces
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        Self::split(text)
            .into_iter()
            .map(|w| self.lookup(w))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            let attach = tok.len() == 1 && tok.chars().all(|c| c.is_ascii_punctuation());
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words = [
            BOS, EOS, UNK, "Dog", "dog", "is", "brown", ".", "Q", ":", "What", "the", "color",
            "of", "?", "A",
        ];
        Vocabulary::new(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn splits_words_and_punctuation() {
        let pieces = Vocabulary::split("Dog is brown. Q: What?");
        assert_eq!(pieces, ["Dog", "is", "brown", ".", "Q", ":", "What", "?"]);
    }

    #[test]
    fn lookup_is_case_sensitive_with_fallback() {
        let v = vocab();
        assert_ne!(v.encode("Dog"), v.encode("dog"));
        assert_eq!(v.encode("COLOR"), v.encode("color"));
        assert_eq!(v.encode("zebra"), vec![v.id(UNK).unwrap()]);
    }

    #[test]
    fn decode_attaches_punctuation() {
        let v = vocab();
        let ids = v.encode("Dog is brown. Q: What is the color of the dog? A:");
        assert_eq!(
            v.decode(&ids),
            "Dog is brown. Q: What is the color of the dog? A:"
        );
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }
}
