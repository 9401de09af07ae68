use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::vocab::{is_reserved, NUM_RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub replace_prob: f64,
    pub rng_seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            replace_prob: 0.15,
            rng_seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(CoreError::Config(format!(
                "replace_prob {} outside [0, 1]",
                self.replace_prob
            )));
        }
        Ok(())
    }
}

/// Replaces each non-reserved token, with probability `replace_prob`, by a
/// uniformly drawn non-reserved id from a vocabulary of `vocab_size`.
pub fn corrupt<R: Rng + ?Sized>(x: &[usize], vocab_size: usize, replace_prob: f64, rng: &mut R) -> Vec<usize> {
    let mut out = x.to_vec();
    if vocab_size <= NUM_RESERVED || replace_prob <= 0.0 {
        return out;
    }
    for tok in out.iter_mut() {
        if is_reserved(*tok) {
            continue;
        }
        if rng.random::<f64>() < replace_prob {
            *tok = rng.random_range(NUM_RESERVED..vocab_size);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![4, 5, 6, 7];
        assert_eq!(corrupt(&x, 10, 0.0, &mut rng), x);
    }

    #[test]
    fn full_probability_resamples_every_position() {
        // Vocabulary of size 5 has exactly one non-reserved token.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![4; 6];
        assert_eq!(corrupt(&x, 5, 1.0, &mut rng), x);
        // With a larger vocabulary the draws are counted directly.
        let mut draws = 0;
        let mut same = 0;
        for _ in 0..2000 {
            let y = corrupt(&[4], 104, 1.0, &mut rng);
            draws += 1;
            same += (y[0] == 4) as usize;
        }
        // Uniform over 100 ids keeps the original about 1% of the time.
        assert!(same < draws / 20);
    }

    #[test]
    fn mean_replacement_count_matches_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Large vocabulary: a replacement almost never redraws the same id.
        let x: Vec<usize> = (0..20).map(|i| 4 + i).collect();
        let vocab = 1_000_000;
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| {
                corrupt(&x, vocab, 0.15, &mut rng)
                    .iter()
                    .zip(&x)
                    .filter(|(a, b)| a != b)
                    .count()
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!((2.7..=3.3).contains(&mean), "mean {mean}");
    }

    #[test]
    fn rejects_out_of_range_probability() {
        let c = CorruptionConfig {
            replace_prob: 1.5,
            rng_seed: 0,
        };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn length_kept_and_no_reserved_introduced(
            x in proptest::collection::vec(0usize..30, 1..20),
            p in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = corrupt(&x, 30, p, &mut rng);
            prop_assert_eq!(y.len(), x.len());
            for (a, b) in x.iter().zip(&y) {
                if is_reserved(*b) {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
