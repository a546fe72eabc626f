//! Joint sign language recognition and translation.
//!
//! A transformer encoder turns a sequence of frame features into
//! spatio-temporal representations that are supervised with CTC against a
//! gloss sequence, while an autoregressive transformer decoder translates the
//! same representations into a spoken-language sentence. Both objectives are
//! trained jointly as a weighted sum.
//!
//! Everything runs on the small reverse-mode autodiff engine in
//! [`numerics`]; there are no external tensor libraries.

pub mod data;
pub mod decoding;
pub mod embeddings;
pub mod evaluation;
mod error;
pub mod config;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
