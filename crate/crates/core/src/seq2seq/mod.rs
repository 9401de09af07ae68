//! Attentional GRU encoder-decoder with a relevance head and a gated
//! style component.

pub mod generate;
pub mod gru;
pub mod model;

pub use generate::{generate_soft, greedy, gumbel_noise, gumbel_softmax, pad_batch, sentence_rows, soft_decode, GreedyOutput, SoftBatch, SoftSentence};
pub use gru::GruParams;
pub use model::{Encoded, Gate, Mode, ModelConfig, Seq2Seq, StepOut};
