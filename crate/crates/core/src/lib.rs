//! Decoupled vocabulary learning for multilingual neural machine translation.
//!
//! Monolingual word embeddings are trained or loaded ([`embeddings`]),
//! aligned into one pivot language's space ([`alignment`]), merged into a
//! language-prefixed vocabulary ([`vocab`]) and frozen inside a small
//! Transformer ([`model`]). Languages the translator never saw can then be
//! plugged in through their aligned embeddings alone ([`translate`]) and
//! improved with iterative back-translation ([`pipeline`]). Synthetic
//! language families ([`synthlang`]) and chrF++/BLEU ([`metrics`]) make the
//! whole loop testable on a laptop.

pub mod alignment;
pub mod container;
pub mod embeddings;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthlang;
pub mod tensor;
pub mod tokenize;
pub mod translate;
pub mod vocab;

pub use error::{Error, Result};
