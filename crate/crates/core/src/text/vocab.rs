use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id mapping with four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn is_reserved(id: usize) -> bool {
    id < NUM_RESERVED
}

impl Vocabulary {
    /// Builds from whitespace-tokenized lines. Tokens seen at least
    /// `min_freq` times are kept, ordered by descending count then token.
    pub fn build<'a, I>(lines: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for line in lines {
            for tok in line.split_whitespace() {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(CoreError::EmptyCorpus("no tokens to build a vocabulary from".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())))
    }

    /// Non-reserved tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces. PAD and BOS are dropped and decoding
    /// stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(self.token(id)),
            }
        }
        out.join(" ")
    }

    /// Non-reserved tokens, one per line; line `n` holds id `n + 4`.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tokens(
            text.lines().filter(|l| !l.is_empty()).map(str::to_string),
        ))
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_lines().as_bytes()))
    }
}
