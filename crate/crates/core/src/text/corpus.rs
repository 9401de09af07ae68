use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::text::vocab::Vocabulary;

/// Binary style label.
pub type Style = u8;

/// Untokenized sentences with their style labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCorpus {
    pub lines: Vec<String>,
    pub labels: Vec<Style>,
}

/// Integer-encoded sentences with their style labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledCorpus {
    pub sentences: Vec<Vec<usize>>,
    pub labels: Vec<Style>,
}

pub fn split_path(dir: &Path, split: &str, style: Style) -> PathBuf {
    dir.join(format!("{split}.style{style}.txt"))
}

fn normalize(line: &str, lowercase: bool) -> String {
    let joined = line.split_whitespace().collect::<Vec<_>>().join(" ");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

pub fn read_lines(path: &Path, lowercase: bool) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| normalize(l, lowercase))
        .filter(|l| !l.is_empty())
        .collect())
}

impl RawCorpus {
    /// Reads `<split>.style0.txt` and `<split>.style1.txt` from `dir`.
    pub fn load_split(dir: &Path, split: &str, lowercase: bool) -> Result<Self> {
        let mut c = RawCorpus::default();
        for style in [0, 1] {
            for line in read_lines(&split_path(dir, split, style), lowercase)? {
                c.lines.push(line);
                c.labels.push(style);
            }
        }
        if c.lines.is_empty() {
            return Err(CoreError::EmptyCorpus(format!("split `{split}` in {}", dir.display())));
        }
        Ok(c)
    }

    pub fn write_split(&self, dir: &Path, split: &str) -> Result<()> {
        for style in [0, 1] {
            let mut text = String::new();
            for (l, s) in self.lines.iter().zip(&self.labels) {
                if *s == style {
                    text.push_str(l);
                    text.push('\n');
                }
            }
            std::fs::write(split_path(dir, split, style), text)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn encode(&self, vocab: &Vocabulary) -> LabeledCorpus {
        LabeledCorpus {
            sentences: self.lines.iter().map(|l| vocab.encode(l)).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (l, s) in self.lines.iter().zip(&self.labels) {
            h.update([*s]);
            h.update(l.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

impl LabeledCorpus {
    pub fn new(sentences: Vec<Vec<usize>>, labels: Vec<Style>) -> Result<Self> {
        if sentences.len() != labels.len() {
            return Err(CoreError::CountMismatch {
                what: "labels",
                expected: sentences.len(),
                got: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l > 1) {
            return Err(CoreError::UnknownStyle(*bad as usize));
        }
        Ok(LabeledCorpus { sentences, labels })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Fails unless both styles occur.
    pub fn require_both_labels(&self) -> Result<()> {
        for s in [0, 1] {
            if !self.labels.contains(&s) {
                return Err(CoreError::MissingLabel(s));
            }
        }
        Ok(())
    }

    pub fn filter_style(&self, style: Style) -> LabeledCorpus {
        let (sentences, labels) = self
            .sentences
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == style)
            .map(|(s, l)| (s.clone(), *l))
            .unzip();
        LabeledCorpus { sentences, labels }
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledCorpus {
        LabeledCorpus {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn with_flipped_labels(&self) -> LabeledCorpus {
        LabeledCorpus {
            sentences: self.sentences.clone(),
            labels: self.labels.iter().map(|l| 1 - l).collect(),
        }
    }

    /// Drops empty sentences.
    pub fn non_empty(&self) -> LabeledCorpus {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| !self.sentences[i].is_empty()).collect();
        self.subset(&idx)
    }
}
