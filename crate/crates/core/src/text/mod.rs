//! Vocabulary, corpora, batching and input corruption.

pub mod batch;
pub mod corpus;
pub mod corrupt;
pub mod vocab;

pub use batch::{shuffled_order, Batch};
pub use corpus::{LabeledCorpus, RawCorpus, Style};
pub use corrupt::{corrupt, CorruptionConfig};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};
