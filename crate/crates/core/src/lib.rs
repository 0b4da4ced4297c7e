//! Encoder-only multi-talker sequence transduction on synthetic token mixtures.
//!
//! The pipeline: a shared transformer encoder feeds one of two count-specific
//! branches, an LSTM separator splits the branch output into per-talker
//! streams, and each stream is trained with CTC. An autoregressive teacher
//! decoder trained on serialized targets supplies a distillation signal to
//! the encoder, and a small attention-pooling head predicts the talker count
//! used to pick the branch at inference time.

pub mod autodiff;
pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod mixtures;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sot;
pub mod tch;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
