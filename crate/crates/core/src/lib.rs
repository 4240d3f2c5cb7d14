//! Mechanistic-interpretability toolkit for encoder-decoder speech
//! recognition transformers, built around a small deterministic reference
//! model.

pub mod encoder_lens;
pub mod error;
pub mod experiments;
pub mod instrument;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod toy;
pub mod vocab;

pub use error::{Error, Result};
