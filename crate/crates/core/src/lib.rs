//! Self-supervised training of a decoder that turns image embeddings into
//! bounded additive noise, plus the tooling to evaluate and export attacks.

pub mod augment;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
