//! Joint handwritten-text transcription and named-entity tagging on
//! multi-line record images.
//!
//! The pipeline: a residual CNN backbone turns a grayscale record image into
//! a /32-downsampled feature map, adaptive 2D positional encoding adds
//! height/width information, the map is flattened into a sequence, and a
//! transformer encoder-decoder emits characters plus entity tags in one pass.
//! Training corpora are produced by a deterministic synthetic record
//! generator, so the whole system runs end to end on a single machine.
//!
//! Module map:
//! - [`datasynth`] — synthetic records, glyph rendering, block extraction, datasets
//! - [`vocab`] — class set, target-sequence encoding/decoding, entity parsing
//! - [`backbone`] — image preprocessing and the residual feature extractor
//! - [`posenc`] — sinusoid tables, adaptive 2D positional encoding, flattening
//! - [`transformer`] — encoder, decoder, greedy decoding
//! - [`model`] — the assembled network with a named-parameter registry
//! - [`training`] — loss, optimizer, the six learning scenarios, checkpoints
//! - [`metrics`] — character error rate and entity-level basic/complete scores
//! - [`selftest`] — fast invariant suite used by the CLI
//! - [`oracles`] — independent reference implementations used by tests

pub mod backbone;
pub mod config;
pub mod datasynth;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod posenc;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod training;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;
