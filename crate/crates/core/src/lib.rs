//! Robust inference by crop selection.
//!
//! A score function ranks every `k x k` crop of an image; the best local
//! maximum is handed to an embedder. Because the chosen crop moves with the
//! content, the embedder output is stable under translations.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod scoring;
pub mod selection;
pub mod theory;

pub use error::{Error, Result};
