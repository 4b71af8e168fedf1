//! Implicit neural representation (INR) reconstruction for circular cone-beam
//! and fan-beam CT with a truncated field of view.
//!
//! The attenuation field is a small MLP fed by a multi-resolution hash
//! encoding. Training runs either over the truncated field of view alone or
//! over an extended domain, where points outside the field of view are
//! sampled sparsely and encoded with only the coarsest hash levels.
//!
//! Module map:
//! - [`geometry`]: scan geometry, rays, box clipping
//! - [`phantom`]: analytic ellipsoid phantoms and exact line integrals
//! - [`encoder`]: multi-resolution hash encoding and its restricted variant
//! - [`network`]: the field MLP with hand-written backpropagation
//! - [`projector`]: two-zone ray sampling and differentiable quadrature
//! - [`trainer`]: Adam, batching, stopping rule, volume reconstruction
//! - [`baseline`]: FBP/FDK and sinogram extrapolation
//! - [`metrics`]: PSNR, SSIM, difference images
//! - [`io`] and [`config`]: file containers and run configuration

pub mod baseline;
pub mod config;
pub mod encoder;
mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod projector;
mod real;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use field::Field;
pub use geometry::{Aabb, Domain, GeometryMode, Ray, ScanGeometry};
pub use real::Real;
pub use volume::{GridSpec, Sinogram, VolumeGrid};
