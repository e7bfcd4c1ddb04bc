//! Weakly supervised land-cover segmentation from coarse patch labels.
//!
//! Pixel-level classifiers are trained from one low-resolution label per
//! 64x64 patch by treating each patch as a bag of pixel instances. The
//! crate contains the autodiff engine, the pixel feature extractor, the MIL
//! pooling operators, the multi-class / non-negative PU risks, a synthetic
//! scene pipeline, training and evaluation.

pub mod diffcore;
pub mod error;
pub mod evalx;
pub mod milpool;
pub mod model;
pub mod risk;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
