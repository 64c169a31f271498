// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-vocabulary word tokenizer.
//!
//! Words are whitespace separated; a line break is its own token. The
//! vocabulary is every word of the prompt template family, the integers
//! -20..=60 and the response keywords.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::game::{PromptTemplate, DICTATOR_KEY, RECIPIENT_KEY, TRANSFER_KEY};

pub type TokenId = u32;

pub const NEWLINE: &str = "\n";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Vocabulary covering the built-in template family.
    pub fn for_template(template: &PromptTemplate) -> Self {
        let mut words: Vec<String> = template.words().into_iter().map(str::to_owned).collect();
        words.extend(["male", "female"].map(String::from));
        words.extend((-20..=60).map(|n: i32| n.to_string()));
        words.extend([TRANSFER_KEY, DICTATOR_KEY, RECIPIENT_KEY, NEWLINE, EOS].map(String::from));
        words.sort();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { vocab: words, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Tokenization(word.to_owned()))
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.vocab[id as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(self.id(NEWLINE)?);
            }
            for w in line.split_whitespace() {
                out.push(self.id(w)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace; `<eos>` is dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id);
            if w == EOS {
                continue;
            }
            if w == NEWLINE {
                out.push('\n');
                continue;
            }
            if !(out.is_empty() || out.ends_with('\n')) {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{build_prompt, format_response, sample_config};

    fn tok() -> Tokenizer {
        Tokenizer::for_template(PromptTemplate::builtin())
    }

    #[test]
    fn prompts_round_trip() {
        let t = tok();
        for i in 0..200 {
            let p = build_prompt(&sample_config(3, i));
            assert_eq!(t.decode(&t.encode(&p).unwrap()), p);
        }
    }

    #[test]
    fn response_round_trip() {
        let t = tok();
        let r = format_response(-20, 60, 0);
        assert_eq!(t.decode(&t.encode(&r).unwrap()), r);
    }

    #[test]
    fn vocabulary_covers_factor_levels_and_digits() {
        let t = tok();
        for w in ["male", "female", "give", "take", "meet", "stranger", "$20", "<eos>", "\n"] {
            t.id(w).unwrap();
        }
        for n in -20..=60 {
            t.id(&n.to_string()).unwrap();
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        assert!(matches!(tok().encode("You are a wizard"), Err(Error::Tokenization(w)) if w == "wizard"));
    }
}
