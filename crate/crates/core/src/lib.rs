//! Transformer encoder-decoder with a learned future-cost objective.
//!
//! Three model variants share one architecture:
//!
//! * **baseline**: the plain encoder-decoder, trained with cross-entropy.
//! * **model1**: adds a gated future-context cell over each decoder state
//!   and an auxiliary loss predicting the *next* target word from it.
//!   Decoding is unchanged.
//! * **model2**: additionally fuses the previous step's future context into
//!   the current decoder state through a learned scalar gate, at training and
//!   decoding time.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod futurecost;
pub mod model;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
