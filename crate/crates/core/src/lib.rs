//! Building blocks for voxelwise encoding models of naturalistic fMRI.
//!
//! The crate is organised as the stages of an encoding pipeline:
//!
//! 1. [`assembly`] pairs brain time series with time-stamped stimulus events.
//! 2. [`features`] turns events into event-level feature matrices.
//! 3. [`downsample`] aggregates event-level features onto the TR grid.
//! 4. [`fir`] adds lagged copies to model hemodynamic delay.
//! 5. [`mapping`] fits ridge regression under leakage-aware cross-validation
//!    and scores predictions with voxelwise Pearson correlation.
//!
//! [`analysis`] holds methodological audits (temporal leakage, head motion)
//! and [`synth`] generates assemblies with known ground truth.

// Lists holding one run range are intentional throughout.
#![allow(clippy::single_range_in_vec_init)]

pub mod analysis;
pub mod assembly;
pub mod downsample;
pub mod error;
pub mod features;
pub mod fir;
pub mod io;
pub mod mapping;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

/// Dense real matrix used throughout (rows are timepoints or events).
pub type Matrix = nalgebra::DMatrix<f64>;
