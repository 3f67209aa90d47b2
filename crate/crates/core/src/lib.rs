//! Synthetic post-disaster supervision for cross-domain damage
//! classification.
//!
//! The pipeline edits a pre-disaster image into a labeled post-disaster
//! image with a text-conditioned masked-token generator, then trains a
//! siamese classifier in two stages: end to end on labeled source domains,
//! then only the head on synthetic target pairs.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod maskgen;
pub mod masking;
pub mod plot;
pub mod prompts;
pub mod raster;
pub mod scorer;
pub mod seed;
pub mod synthesis;
pub mod tokens;
pub mod train;
pub mod toyworld;
pub mod vqcodec;

pub use error::{Error, Result};
pub use raster::Image;
pub use tokens::TokenGrid;

/// Scalar used by the trained models and the command line.
pub type Real = f32;
pub type Codec = vqcodec::CodecModel<Real>;
pub type Generator = maskgen::GeneratorModel<Real>;
pub type Scorer = scorer::ScorerModel<Real>;
pub type Classifier = classifier::ClassifierModel<Real>;
