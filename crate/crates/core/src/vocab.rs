//! Word-level tokenizer and vocabulary with fixed reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::Dialogue;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const USR: u32 = 5;
pub const SYS: u32 = 6;

pub const RESERVED: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"];

/// Lowercases and splits on whitespace; each non-alphanumeric character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    /// Builds a vocabulary from every utterance of `corpus`. Ids after the
    /// reserved block are ordered by descending frequency, then lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a Dialogue>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut dialogues = 0usize;
        for d in corpus {
            dialogues += 1;
            for turn in &d.turns {
                for w in split_words(&turn.text) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if dialogues == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens, min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{}: vocabulary does not start with the reserved tokens",
                path.display()
            )));
        }
        Self::from_tokens(tokens, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Role, Turn};

    fn dialogue(texts: &[&str]) -> Dialogue {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn {
                role: if i % 2 == 0 { Role::User } else { Role::System },
                text: t.to_string(),
            })
            .collect();
        Dialogue {
            id: "d".into(),
            turns,
        }
    }

    #[test]
    fn split_rules() {
        assert_eq!(split_words("Hello!"), vec!["hello", "!"]);
        assert!(split_words("").is_empty());
        assert_eq!(split_words("  a,b  c "), vec!["a", ",", "b", "c"]);
    }

    #[test]
    fn reserved_plus_words() {
        let v = Vocab::build([&dialogue(&["hello hello", "hello"])], 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(7), Some("hello"));
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as u32);
        }
    }

    #[test]
    fn min_freq_maps_rare_words_to_unk() {
        let v = Vocab::build([&dialogue(&["common rare common", "common"])], 2).unwrap();
        assert_eq!(v.tokenize("rare"), vec![UNK]);
        assert_eq!(v.tokenize("common"), vec![7]);
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
    }

    #[test]
    fn equal_frequency_ties_are_lexicographic() {
        let v = Vocab::build([&dialogue(&["zeta alpha", "mid"])], 1).unwrap();
        assert_eq!(&v.tokens()[7..], ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(Vocab::build(std::iter::empty(), 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build([&dialogue(&["hi there", "hello !"])], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.tokenize("Hello!"), v.tokenize("Hello!"));
    }
}
