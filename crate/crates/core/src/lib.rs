//! Commuting-flow prediction at desk scale.
//!
//! The crate covers the full pipeline: synthetic city generation and CSV
//! ingestion ([`geodata`]), a multi-scale relative-location encoder
//! ([`locenc`]), a dense-tensor numeric kernel with reverse-mode gradients
//! ([`nn`]), the transformer-based flow model ([`model`]), training with
//! RMSprop and early stopping ([`train`]), classical gravity/radiation
//! baselines ([`baselines`]), evaluation metrics ([`metrics`]), and
//! explainability exports ([`analysis`]).
//!
//! Everything is deterministic for a fixed seed. With the `parallel` feature
//! (default) data-parallel inner loops run on rayon; reductions keep a fixed
//! order so results are identical to the sequential build.

pub mod analysis;
pub mod baselines;
pub mod error;
pub mod geodata;
pub mod locenc;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod predict;
pub mod rng;
pub mod train;

pub use error::FlowError;
