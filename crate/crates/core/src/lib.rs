//! Scalar-controlled text generation.
//!
//! LSTM and Transformer decoders receive, at every step, the token
//! embedding concatenated with an embedding of the desired control value
//! and (for length and edit) an embedding of the control value realized by
//! the prefix generated so far. Four embedding strategies are available;
//! the evaluation tooling measures how well each one extrapolates to
//! control values never seen in training.

pub mod autodiff;
pub mod checkpoint;
pub mod control;
pub mod data;
pub mod decode;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod model;
pub mod train;

pub use error::{Error, Result};
