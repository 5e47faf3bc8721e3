//! Trajectory representation learning from two complementary expressions of
//! the same journey: a sequence of grid cells and a sequence of road
//! segments.
//!
//! The crate is organised bottom-up:
//!
//! - [`math`]: tensors, the differentiation tape and the optimiser.
//! - [`data`]: geodesy, grids, road networks, map matching, masking and the
//!   synthetic world generator.
//! - [`model`]: the grid encoder, the road encoder, the cross-attention
//!   interactor, the pretraining losses and loop.
//! - [`downstream`]: travel-time estimation, classification and
//!   similarity search, with their metrics.
//! - [`config`], [`checkpoint`], [`gradcheck`]: run configuration,
//!   persistence and the finite-difference suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
