//! Word-token vocabulary. The toolkit works on pre-tokenised text; the
//! vocabulary is just an ordered token list with fixed special ids.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const HEADER: &str = "#word-vocab\tv1";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for WordVocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl WordVocab {
    /// Specials first, then `tokens` in the given order (duplicates dropped).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = WordVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s);
        }
        for t in tokens {
            v.push(t);
        }
        v
    }

    /// Tokens seen at least `min_count` times, most frequent first, ties broken
    /// lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut items: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(items.into_iter().map(|(t, _)| t))
    }

    /// Add a token if missing; returns its id.
    pub fn push(&mut self, token: impl Into<String>) -> usize {
        let token = token.into();
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.clone(), i);
        self.tokens.push(token);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{HEADER}")?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, VocabError> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h == HEADER => {}
            _ => return Err(VocabError::Format("missing word-vocab header".into())),
        }
        let tokens: Vec<String> = lines.collect::<Result<_, _>>()?;
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(VocabError::Format("special tokens missing or out of order".into()));
        }
        let v = Self::from_tokens(tokens[NUM_SPECIAL..].iter().cloned());
        if v.len() != tokens.len() {
            return Err(VocabError::Format("duplicate tokens".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency() {
        let v = WordVocab::build("b a b c a b".split(' '), 1);
        assert_eq!(&v.tokens()[NUM_SPECIAL..], &["b", "a", "c"]);
        assert_eq!(v.id("zzz"), UNK);
        let v2 = WordVocab::build("b a b c a b".split(' '), 2);
        assert_eq!(v2.len(), NUM_SPECIAL + 2);
    }

    #[test]
    fn file_round_trip() {
        let v = WordVocab::from_tokens(["東京", "Tokyo", "<ent>"]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(WordVocab::read(&buf[..]).unwrap(), v);
        assert!(WordVocab::read(&b"nope\n"[..]).is_err());
    }
}
