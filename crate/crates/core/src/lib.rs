//! Spherical-camera localisation from globally unique instance labels and
//! per-instance whitened local coordinates.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod files;
pub mod geometry;
pub mod image;
pub mod instance_map;
pub mod labels;
pub mod losses;
pub mod numeric;
pub mod pipeline;
pub mod pnp;
pub mod scene_sim;
