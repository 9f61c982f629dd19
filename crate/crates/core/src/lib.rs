// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy multilingual transformer, per-layer sparse autoencoders and
//! sparse-feature language steering.

pub mod attribution;
pub mod config;
pub mod contrast;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod manifest;
pub mod numerics;
pub mod pipeline;
pub mod sae;
pub mod steering;
pub mod transformer;

pub use error::{Error, Result};
