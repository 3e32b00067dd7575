//! Causal intervention mechanisms for video question answering over
//! precomputed clip and text embeddings.

pub mod binio;
pub mod error;
pub mod features;
pub mod harness;
pub mod intervention;
pub mod mnse;
pub mod nn;
pub mod pcma;
pub mod samplers;

pub use error::{Error, FieldError, Result};
