//! Relevance-gated sequence-to-sequence text style transfer.

pub mod classifier;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lm;
pub mod lrp;
pub mod pipeline;
pub mod seed;
pub mod seq2seq;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{CoreError, Result};
