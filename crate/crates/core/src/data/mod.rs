//! Dialogue corpora: JSONL I/O, serialization, split sampling, masking and batching.

mod batch;
mod masking;
mod sampler;
pub mod synthetic;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, CLS, SEP, SYS, USR};

pub use batch::{make_pretrain_batch, MaskedBatch};
pub use masking::{apply_masking, apply_masking_with, is_maskable, mask_count, MaskConfig, MaskStrategy, MaskedContext};
pub use sampler::{
    response_candidates, sample_response_len, split_and_sample, truncate, PMode, SamplerConfig, SplitSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Alternating user/system utterances `U1, S1, …, Un, Sn`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn num_pairs(&self) -> usize {
        self.turns.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::InvalidDialogue {
                id: self.id.clone(),
                msg,
            })
        };
        if self.turns.is_empty() {
            return fail("dialogue has no turns".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::System };
            if t.role != want {
                return fail(format!(
                    "turn {i} has role {:?}; roles must alternate starting with user",
                    t.role
                ));
            }
        }
        if !self.turns.len().is_multiple_of(2) {
            return fail("dialogue must end with a system turn".into());
        }
        Ok(())
    }

    /// User utterance of turn pair `t` (1-based).
    pub fn user(&self, t: usize) -> &str {
        &self.turns[2 * (t - 1)].text
    }

    /// System utterance of turn pair `t` (1-based).
    pub fn system(&self, t: usize) -> &str {
        &self.turns[2 * (t - 1) + 1].text
    }
}

/// Downstream labels for one dialogue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueLabels {
    pub id: String,
    pub intent: String,
    /// Act names for each system turn.
    pub acts: Vec<Vec<String>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL corpus and validates role alternation. An empty file yields
/// an empty corpus with a warning.
pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let dialogues: Vec<Dialogue> = read_jsonl(path)?;
    if dialogues.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    for d in &dialogues {
        d.validate()?;
    }
    Ok(dialogues)
}

pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    write_jsonl(path, dialogues)
}

pub fn load_labels(path: &Path) -> Result<Vec<DialogueLabels>> {
    read_jsonl(path)
}

pub fn write_labels(path: &Path, labels: &[DialogueLabels]) -> Result<()> {
    write_jsonl(path, labels)
}

/// How much of a dialogue to serialize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upto {
    /// `U1, S1, …, U_t`: the context ending with user turn `t` (1-based).
    Context(usize),
    All,
}

/// A dialogue tokenized once, one id sequence per utterance (role token first).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDialogue {
    pub id: String,
    pub utterances: Vec<Vec<u32>>,
}

impl TokenizedDialogue {
    pub fn new(d: &Dialogue, vocab: &Vocab) -> Self {
        let utterances = d.turns.iter().map(|t| encode_utterance(t, vocab)).collect();
        Self {
            id: d.id.clone(),
            utterances,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.utterances.len() / 2
    }
}

/// `[USR]`/`[SYS]` followed by the utterance tokens.
pub fn encode_utterance(turn: &Turn, vocab: &Vocab) -> Vec<u32> {
    let role = match turn.role {
        Role::User => USR,
        Role::System => SYS,
    };
    std::iter::once(role).chain(vocab.tokenize(&turn.text)).collect()
}

/// `[CLS] ⊕ utterances ⊕ [SEP]`.
pub fn wrap(utterances: &[Vec<u32>]) -> Vec<u32> {
    let mut ids = vec![CLS];
    for u in utterances {
        ids.extend_from_slice(u);
    }
    ids.push(SEP);
    ids
}

pub fn serialize(d: &Dialogue, upto: Upto, vocab: &Vocab) -> Vec<u32> {
    let end = match upto {
        Upto::Context(t) => (2 * t - 1).min(d.turns.len()),
        Upto::All => d.turns.len(),
    };
    let utts: Vec<Vec<u32>> = d.turns[..end].iter().map(|t| encode_utterance(t, vocab)).collect();
    wrap(&utts)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dlg(id: &str, texts: &[&str]) -> Dialogue {
        Dialogue {
            id: id.into(),
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    role: if i % 2 == 0 { Role::User } else { Role::System },
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn load_valid_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            r#"{"id": "a", "turns": [{"role": "user", "text": "hi"}, {"role": "system", "text": "hello"}]}"#,
        )
        .unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].num_pairs(), 1);

        fs::write(
            &p,
            r#"{"id": "bad-one", "turns": [{"role": "system", "text": "hi"}, {"role": "user", "text": "x"}]}"#,
        )
        .unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(err.to_string().contains("bad-one"), "{err}");

        fs::write(&p, "").unwrap();
        assert!(load_corpus(&p).unwrap().is_empty());

        fs::write(&p, "{\"id\": \"a\", \"turns\": []}\n{not json\n").unwrap();
        match load_corpus(&p).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn serialization_rule() {
        let d = dlg("x", &["hi", "hello", "book it", "done"]);
        let v = Vocab::build([&d], 1).unwrap();
        let ids = serialize(&d, Upto::Context(1), &v);
        assert_eq!(ids, vec![CLS, USR, v.id("hi"), SEP]);
        let one = dlg("y", &["hi", "hello"]);
        assert_eq!(
            serialize(&one, Upto::All, &v),
            vec![CLS, USR, v.id("hi"), SYS, v.id("hello"), SEP]
        );
        let ctx2 = serialize(&d, Upto::Context(2), &v);
        assert_eq!(&ctx2[ctx2.len() - 4..], &[USR, v.id("book"), v.id("it"), SEP]);
    }
}
