//! Relation prediction for knowledge graph completion.
//!
//! Given an entity pair `(s, o)`, a shallow network scores every relation:
//! the two entity embeddings are concatenated, passed through one ReLU layer
//! and a sigmoid output layer with one unit per relation. Training treats each
//! distinct pair as a multi-label example (every relation observed between the
//! pair is a positive label, everything else is a zero target, and no negative
//! triples are sampled). Evaluation ranks all relations per test triple and
//! reports Hits@N.
//!
//! Modules follow the pipeline:
//!
//! - [`kg`]: triple files, vocabularies, pair/label index
//! - [`model`]: parameters, forward pass, loss, analytic gradients
//! - [`train`]: batches, Adam, epochs, grid search
//! - [`eval`]: ranking, Hits@N, uniform random baseline
//! - [`checkpoint`]: bit-exact binary model files
//! - [`cli`]: the `relpred` command implementations

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport};
pub use kg::{DatasetSplits, OovPolicy, PairLabelIndex, RawTriple, Split, Triple, Vocabulary};
pub use model::ModelParams;
pub use train::{fit, grid_search, GridSpec, Hyperparams, TrainHistory};
