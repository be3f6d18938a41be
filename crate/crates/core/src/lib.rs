//! Occlusion-aware, adaptively cross-weighted photometric and geometric losses
//! for joint depth, pose and optical-flow estimation, with analytic gradients,
//! a synthetic ground-truth renderer and a first-order pose refiner.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cli;
pub mod colorize;
pub mod crossloss;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod loss;
pub mod occlusion;
pub mod photometric;
pub mod refine;
pub mod sampler;
pub mod synthworld;

pub use error::{Error, Result};
