//! Biplanar X-ray to CT slice reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: attenuation volumes, procedural phantoms, slice/coordinate
//!   extraction and the raw volume file format.
//! - [`geometry`]: pinhole cameras for the two perpendicular views and the
//!   parallel-beam (orthogonal) variant.
//! - [`drr`]: digitally reconstructed radiographs by ray marching.
//! - [`resample`]: placing 2D detector features at 3D slice coordinates.
//! - [`autodiff`]: a small reverse-mode tensor tape with the layers the
//!   network needs, Adam, gradient checking and checkpoints.
//! - [`model`]: encoder, positional encoding and slice decoder.
//! - [`train`]: dataset synthesis, losses, training loop, metrics, evaluation.
//! - [`selftest`]: finite-difference checks of every differentiable op.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod autodiff;
pub mod drr;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod model;
pub mod rawio;
pub mod resample;
pub mod selftest;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use exec::Exec;
