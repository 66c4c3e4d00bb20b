use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[BOS]", "[EOS]"];

/// Closed whitespace vocabulary. Ids `0..3` are reserved; file tokens start at 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid vocabulary token `{w}`")));
            }
            if index.contains_key(w) {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary token `{w}`")));
            }
            index.insert(w.to_string(), tokens.len() as u32);
            tokens.push(w.to_string());
        }
        Ok(Self { tokens, index })
    }

    /// Parses the one-token-per-line file format. Blank lines are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[BOS] word... [EOS]`.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        for w in prompt.split_whitespace() {
            ids.push(self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace normalization.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Collapses runs of whitespace to single spaces.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["red", "square", "a", "photo", "of"]).unwrap()
    }

    #[test]
    fn empty_prompt() {
        assert_eq!(vocab().tokenize("").unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn direct_lookup() {
        let v = vocab();
        assert_eq!(v.tokenize("red square").unwrap(), vec![BOS, 3, 4, EOS]);
    }

    #[test]
    fn unknown_token() {
        assert_eq!(vocab().tokenize("blue square"), Err(Error::UnknownToken("blue".into())));
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::parse("a\n\nb\n").is_err());
        assert!(Vocabulary::parse("a\na\n").is_err());
    }

    #[test]
    fn detokenize_normalizes_whitespace() {
        let v = vocab();
        let p = "  a photo   of red\tsquare ";
        assert_eq!(v.detokenize(&v.tokenize(p).unwrap()), normalize_prompt(p));
    }
}
