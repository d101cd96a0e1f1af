//! Pedestrian detection post-processing for top-view fisheye cameras.
//!
//! A fisheye frame is resampled into a square composite of perspective
//! patches that a stock detector can consume. Detections on the composite are
//! mapped back to polar-axis-aligned rotated boxes in the fisheye frame by
//! regressing over precomputed mapping exemplars, then consolidated with
//! non-maxima suppression and scored with AP and log-average miss rate.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxmap;
pub mod compositor;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod exemplars;
pub mod geometry;
pub mod io;
pub mod nms;
pub mod person_model;
pub mod pipeline;
pub mod raster;
pub mod rotrect;
pub mod synth;

pub use error::{Error, Result};
