//! Transfer accuracy, corpus BLEU and their aggregates, all on a 0-100 scale.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{content_ids, TextCnn};
use crate::error::{CoreError, Result};
use crate::text::corpus::Style;

/// Percentage of `outputs` the classifier assigns to their target style.
/// An output with no words counts as a miss.
pub fn transfer_accuracy(classifier: &TextCnn, outputs: &[Vec<usize>], targets: &[Style]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(CoreError::EmptyCorpus("transfer outputs".into()));
    }
    if outputs.len() != targets.len() {
        return Err(CoreError::CountMismatch {
            what: "target styles",
            expected: outputs.len(),
            got: targets.len(),
        });
    }
    let mut hits = 0;
    for (o, &s) in outputs.iter().zip(targets) {
        if s > 1 {
            return Err(CoreError::UnknownStyle(s as usize));
        }
        if !content_ids(o).is_empty() && classifier.predict(o)? == s {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to numerator and denominator of every precision above unigrams.
    AddOne,
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self, smoothing: Smoothing) -> [f64; 4] {
        let mut p = [0.0; 4];
        for n in 0..4 {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            p[n] = match smoothing {
                Smoothing::AddOne if n > 0 => (m + 1.0) / (t + 1.0),
                _ if t == 0.0 => 0.0,
                _ => m / t,
            };
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self, smoothing: Smoothing) -> f64 {
        let p = self.precisions(smoothing);
        if p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / 4.0;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

fn ngram_counts<T: Eq + std::hash::Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus statistics; `references[i]` are the references of `outputs[i]`.
/// Counts are clipped by the largest count in any single reference and the
/// effective reference length is the closest one (shorter wins ties).
pub fn bleu_stats<T: Eq + std::hash::Hash>(outputs: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<BleuStats> {
    if outputs.len() != references.len() {
        return Err(CoreError::CountMismatch {
            what: "reference sets",
            expected: outputs.len(),
            got: references.len(),
        });
    }
    let mut st = BleuStats::default();
    for (hyp, refs) in outputs.iter().zip(references) {
        if refs.is_empty() {
            return Err(CoreError::Invalid("sentence without references".into()));
        }
        st.hyp_len += hyp.len();
        st.ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            st.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(st)
}

pub fn bleu<T: Eq + std::hash::Hash>(outputs: &[Vec<T>], references: &[Vec<Vec<T>>], smoothing: Smoothing) -> Result<f64> {
    Ok(bleu_stats(outputs, references)?.score(smoothing))
}

/// Geometric and harmonic means of accuracy and BLEU.
pub fn aggregate(acc: f64, bleu: f64) -> Result<(f64, f64)> {
    if !(acc >= 0.0 && bleu >= 0.0) {
        return Err(CoreError::Invalid(format!("metrics must be nonnegative, got {acc} and {bleu}")));
    }
    let g2 = (acc * bleu).sqrt();
    let h2 = if acc + bleu == 0.0 { 0.0 } else { 2.0 * acc * bleu / (acc + bleu) };
    Ok((g2, h2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub bleu: f64,
    pub g2: f64,
    pub h2: f64,
    pub n_sentences: usize,
    /// BLEU variant used.
    pub bleu_variant: String,
}

impl MetricReport {
    pub fn new(acc: f64, bleu: f64, n_sentences: usize, smoothing: Smoothing) -> Result<Self> {
        let (g2, h2) = aggregate(acc, bleu)?;
        let bleu_variant = match smoothing {
            Smoothing::None => "corpus BLEU-4, whitespace tokens, no smoothing",
            Smoothing::AddOne => "corpus BLEU-4, whitespace tokens, add-one smoothing for n>1",
        }
        .to_string();
        Ok(MetricReport {
            acc,
            bleu,
            g2,
            h2,
            n_sentences,
            bleu_variant,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.bleu_variant)?;
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}", "n", "acc", "bleu", "g2", "h2")?;
        write!(
            f,
            "{:>8} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            self.n_sentences, self.acc, self.bleu, self.g2, self.h2
        )
    }
}
