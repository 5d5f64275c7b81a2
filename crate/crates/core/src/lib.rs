//! Physically-based inverse rendering of glossy objects represented as 2D
//! Gaussian surfels.
//!
//! The pipeline has two stages. Geometry is fitted first under split-sum
//! image-based shading with monocular prior losses; materials and lighting
//! are then refined with a multiple-importance-sampled Monte Carlo estimate
//! of the rendering equation, using surfel ray tracing for visibility and
//! one-bounce indirect light. An optional learned specular compensation term
//! (spherical mip-grid plus a small MLP) refines novel-view synthesis and is
//! switched off for relighting.

pub mod brdf;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod envlight;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod math;
pub mod mc;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod speccomp;
pub mod splat;
pub mod surfel;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
