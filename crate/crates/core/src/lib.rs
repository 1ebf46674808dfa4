//! Radiance fields on vector–matrix decomposed grids, trained jointly with
//! directly indexed blur kernels so that sharp views can be rendered from
//! defocus-blurred captures.
//!
//! Pipeline per training patch: render a `P x P` clean patch, crop its
//! stride-1 `K x K` windows, look up one learnable kernel per target pixel
//! from its sharpness group, convolve, apply the per-view response curve and
//! compare with the blurry capture.

pub mod bench;
pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod field;
pub mod raster;
pub mod real;
pub mod kernels;
pub mod metrics;
pub mod render;
pub mod sampler;
pub mod sharpness;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
