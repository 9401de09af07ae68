//! Generated marker corpus: neutral filler words plus exactly one style
//! marker per sentence. Swapping the marker for any opposite-style marker
//! gives an exact reference transfer, so four references exist per sentence.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed::rng_for;
use crate::text::corpus::{split_path, RawCorpus, Style};

pub const FILLERS: [&str; 24] = [
    "the", "food", "service", "place", "staff", "menu", "was", "is", "and", "we", "it", "our",
    "they", "table", "order", "room", "very", "really", "so", "here", "there", "today", "with",
    "at",
];

/// Markers indexed by style: 0 is negative, 1 is positive.
pub const MARKERS: [[&str; 4]; 2] = [
    ["bad", "awful", "bland", "rude"],
    ["good", "great", "tasty", "friendly"],
];

pub fn marker_style(token: &str) -> Option<Style> {
    (0..2u8).find(|&s| MARKERS[s as usize].contains(&token))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 10_000,
            min_fillers: 3,
            max_fillers: 7,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticCorpus {
    pub corpus: RawCorpus,
    /// Token index of the marker in each sentence.
    pub marker_pos: Vec<usize>,
    /// Four marker-substituted references per sentence.
    pub references: Vec<Vec<String>>,
}

fn substitute(tokens: &[&str], pos: usize, marker: &str) -> String {
    let mut t = tokens.to_vec();
    t[pos] = marker;
    t.join(" ")
}

impl SyntheticCorpus {
    /// Balanced styles, alternating labels.
    pub fn generate(cfg: &SyntheticConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "synthetic");
        let mut out = SyntheticCorpus::default();
        for i in 0..cfg.sentences {
            let style = (i % 2) as Style;
            let k = rng.random_range(cfg.min_fillers..=cfg.max_fillers);
            let mut tokens: Vec<&str> = (0..k).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
            let pos = rng.random_range(0..=k);
            let marker = *MARKERS[style as usize].choose(&mut rng).unwrap();
            tokens.insert(pos, marker);
            let refs = MARKERS[1 - style as usize]
                .iter()
                .map(|m| substitute(&tokens, pos, m))
                .collect();
            out.corpus.lines.push(tokens.join(" "));
            out.corpus.labels.push(style);
            out.marker_pos.push(pos);
            out.references.push(refs);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> SyntheticCorpus {
        SyntheticCorpus {
            corpus: RawCorpus {
                lines: self.corpus.lines[start..end].to_vec(),
                labels: self.corpus.labels[start..end].to_vec(),
            },
            marker_pos: self.marker_pos[start..end].to_vec(),
            references: self.references[start..end].to_vec(),
        }
    }

    /// Writes the split files plus `<split>.style{s}.ref{k}.txt`, aligned
    /// line by line with `<split>.style{s}.txt`.
    pub fn write_split(&self, dir: &Path, split: &str) -> Result<()> {
        self.corpus.write_split(dir, split)?;
        for style in [0u8, 1] {
            for k in 0..4 {
                let mut text = String::new();
                for (refs, s) in self.references.iter().zip(&self.corpus.labels) {
                    if *s == style {
                        text.push_str(&refs[k]);
                        text.push('\n');
                    }
                }
                std::fs::write(reference_path(dir, split, style, k), text)?;
            }
        }
        Ok(())
    }
}

pub fn reference_path(dir: &Path, split: &str, style: Style, k: usize) -> std::path::PathBuf {
    let p = split_path(dir, split, style);
    p.with_file_name(format!("{split}.style{style}.ref{k}.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_sentence_has_one_marker_of_its_style() {
        let c = SyntheticCorpus::generate(&SyntheticConfig {
            sentences: 500,
            ..Default::default()
        });
        for i in 0..c.len() {
            let toks: Vec<&str> = c.corpus.lines[i].split(' ').collect();
            assert!((4..=8).contains(&toks.len()));
            let markers: Vec<usize> = (0..toks.len()).filter(|&j| marker_style(toks[j]).is_some()).collect();
            assert_eq!(markers, vec![c.marker_pos[i]]);
            assert_eq!(marker_style(toks[c.marker_pos[i]]), Some(c.corpus.labels[i]));
            for r in &c.references[i] {
                let rt: Vec<&str> = r.split(' ').collect();
                assert_eq!(rt.len(), toks.len());
                assert_eq!(marker_style(rt[c.marker_pos[i]]), Some(1 - c.corpus.labels[i]));
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SyntheticConfig {
            sentences: 50,
            ..Default::default()
        };
        assert_eq!(SyntheticCorpus::generate(&cfg).corpus, SyntheticCorpus::generate(&cfg).corpus);
    }
}
