use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::seed::rng_for;
use crate::text::corpus::Style;
use crate::text::vocab::{BOS, EOS, PAD};

/// A right-padded mini-batch.
///
/// `src` holds the (possibly truncated) sentences padded to the batch
/// maximum. Decoder framing adds one column: `dec_input` is `BOS x` and
/// `dec_target` is `x EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Style>,
    pub dec_input: Vec<Vec<usize>>,
    pub dec_target: Vec<Vec<usize>>,
    /// Sentences cut down to `max_len`.
    pub truncated: usize,
}

impl Batch {
    pub fn new(seqs: &[&[usize]], labels: &[Style], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(CoreError::Invalid("empty batch".into()));
        }
        if seqs.len() != labels.len() {
            return Err(CoreError::CountMismatch {
                what: "batch labels",
                expected: seqs.len(),
                got: labels.len(),
            });
        }
        if max_len == 0 {
            return Err(CoreError::Invalid("max_len must be at least 1".into()));
        }
        let mut truncated = 0;
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(CoreError::Invalid("empty sentence in batch".into()));
            }
            if s.len() > max_len {
                truncated += 1;
            }
            lengths.push(s.len().min(max_len));
        }
        let width = *lengths.iter().max().unwrap();
        let mut src = Vec::with_capacity(seqs.len());
        let mut dec_input = Vec::with_capacity(seqs.len());
        let mut dec_target = Vec::with_capacity(seqs.len());
        for (s, &len) in seqs.iter().zip(&lengths) {
            let mut row = s[..len].to_vec();
            row.resize(width, PAD);
            let mut inp = vec![BOS];
            inp.extend_from_slice(&s[..len]);
            inp.resize(width + 1, PAD);
            let mut tgt = s[..len].to_vec();
            tgt.push(EOS);
            tgt.resize(width + 1, PAD);
            src.push(row);
            dec_input.push(inp);
            dec_target.push(tgt);
        }
        Ok(Batch {
            src,
            lengths,
            labels: labels.to_vec(),
            dec_input,
            dec_target,
            truncated,
        })
    }

    pub fn size(&self) -> usize {
        self.src.len()
    }

    pub fn width(&self) -> usize {
        self.src[0].len()
    }

    /// Column `t` of the source matrix.
    pub fn src_column(&self, t: usize) -> Vec<usize> {
        self.src.iter().map(|r| r[t]).collect()
    }

    /// 1.0 where position `t` of the source is a real token.
    pub fn src_mask(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&l| (t < l) as u8 as f64).collect()
    }

    /// 1.0 where decoder step `t` has a target (tokens and the final EOS).
    pub fn target_mask(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&l| (t <= l) as u8 as f64).collect()
    }

    pub fn dec_input_column(&self, t: usize) -> Vec<usize> {
        self.dec_input.iter().map(|r| r[t]).collect()
    }

    pub fn dec_target_column(&self, t: usize) -> Vec<usize> {
        self.dec_target.iter().map(|r| r[t]).collect()
    }
}

/// Reproducible permutation of `0..n` for one epoch.
pub fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &format!("shuffle/{epoch}"));
    order.shuffle(&mut rng);
    order
}
