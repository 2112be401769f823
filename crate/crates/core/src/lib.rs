//! Self-organizing-map representation learning with longitudinal
//! consistency regularization, on synthetic longitudinal vector data.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: tape-based reverse-mode differentiation and Adam.
//! - [`model`]: dense encoder/decoder and the reconstruction loss.
//! - [`som`]: SOM grid, neighborhood weights, SOM/commitment losses, k-means.
//! - [`longitudinal`]: trajectories, EMA reference trajectories, direction loss.
//! - [`synth`]: synthetic cohort generator and pair sampling.
//! - [`trainer`]: two-phase training and checkpoints.
//! - [`analysis`]: similarity grids, distance correlation, PCA, probes.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod analysis;
pub mod diff;
pub mod error;
pub mod longitudinal;
pub mod model;
pub mod som;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
