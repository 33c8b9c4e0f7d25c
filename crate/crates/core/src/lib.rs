//! A self-contained paraphrase generation engine: stacked LSTM
//! encoder-decoder networks with periodic skip connections, trained by
//! explicit backpropagation through time, decoded with beam search, and
//! scored with a multi-reference evaluation suite (BLEU, TER, embedding
//! similarity, bootstrap variance, paired randomization significance).
//!
//! All numerics are written out by hand over plain row-major matrices, in
//! f32 or f64, with a fixed in-repo random generator; given a seed and a
//! thread count of one, every run is bit-reproducible.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod trainer;
