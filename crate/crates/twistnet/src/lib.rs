//! Second-order channel-interaction CNNs on a self-contained tensor engine.
//!
//! The crate builds residual texture-recognition networks whose TwistBlocks
//! inject directionally displaced pairwise channel products (spiral-twisted
//! channel interaction) through a gated branch. Everything runs on the
//! in-crate tensor/autograd engine: no external ML framework.
//!
//! Layout:
//! - [`tensor`]: dense tensors, the autodiff tape, and the deterministic PRNG
//! - [`ops`]: convolutions, normalizations, pooling, pairwise products, loss
//! - [`stci`]: twist heads, adaptive interaction selection, multi-head module
//! - [`arch`]: blocks, network builders, parameter/FLOP counters
//! - [`data`]: synthetic oriented-texture datasets and PGM/PPM ingestion
//! - [`train`]: SGD with Nesterov momentum, schedules, evaluation
//! - [`analysis`]: interaction-matrix extraction and export
//! - [`checkpoint`] / [`config`]: persistence and run configuration
//! - [`gradcheck`]: finite-difference validation suite

pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod stci;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{rng::Rng, tape::Tape, Element, Tensor};
