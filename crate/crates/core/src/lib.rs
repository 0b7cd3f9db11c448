//! Subword language modeling toolkit.
//!
//! The crate covers the whole pipeline: unsupervised subword segmentation
//! with boundary markers ([`subseg`]), a small reverse-mode autodiff core
//! ([`numcore`]), a masked bidirectional encoder ([`mlm`]), a recurrent
//! transformer with cached segment memory and relative positions ([`xl`]),
//! corpus preparation ([`corpusio`]), training loops and checkpoints
//! ([`trainer`]), and perplexity / pseudo-perplexity scoring ([`scorer`]).

pub mod cli;
pub mod corpusio;
pub mod error;
pub mod mlm;
pub mod nn;
pub mod numcore;
pub mod scorer;
pub mod subseg;
pub mod trainer;
pub mod xl;

pub use error::{Error, Result};
