//! Hierarchical prototypical networks for joint sound event detection and
//! speaker identification.
//!
//! The pipeline runs audio through a log-mel frontend ([`dsp`]) into a small
//! convolutional [`encoder`], builds per-level class prototypes over a
//! [`taxonomy`] ([`protostore`]), classifies every level with a softmax over
//! negative distances ([`classifier`]), and trains the encoder episodically
//! with a level-weighted cross-entropy ([`trainer`]).

pub mod classifier;
pub mod corpus;
pub mod dsp;
mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluator;
mod io;
pub mod protostore;
pub mod seed;
pub mod taxonomy;
pub mod trainer;

pub use embedding::Embedding;
pub use error::{Error, Result};
pub use taxonomy::{ClassId, TaxonomyTree};
