//! Cycle inverse-consistent 3D deformable registration engine.
//!
//! The crate estimates a pair of dense displacement fields (forward and
//! backward) between two 3D scalar volumes by direct multi-resolution
//! optimization of a composite objective: MS-SSIM image similarity, L2
//! smoothness of the fields, image-level and flow-level cycle consistency,
//! and a hinge penalty on non-positive Jacobian determinants. Alongside the
//! solver it provides the evaluation toolkit used to audit results: global
//! similarity metrics (SSIM, NCC, MI, PSNR, MSE, MAE, threshold-Dice,
//! gradient similarity) and deformation-regularity statistics (Jacobian
//! determinant maps, logJD maps, folding fractions, magnitude maps).
//!
//! Everything here is pure computation over in-memory grids; file formats,
//! batch runs and the command-line interface live in the companion `cicreg`
//! crate. The crate is `no_std` (with `alloc`) so the numeric kernels carry
//! no platform dependencies; float transcendentals come from `libm`.
//!
//! Conventions, fixed across the whole crate:
//! - grids are x-fastest: `index = x + nx*(y + ny*z)`;
//! - displacement fields live on the target grid and pull back from the
//!   source: `warped(x) = source(x + u(x))`, `u` in voxel units;
//! - out-of-range samples clamp to the border (replicate);
//! - intensities are stored as `f32`, reductions run in `f64`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
mod fmath;
pub mod volume;
mod filter;
pub mod warp;
pub mod losses;
pub mod jacobian;
pub mod metrics;
pub mod optimizer;
pub mod gradcheck;
pub mod synth;

pub use error::{Error, Result};
pub use jacobian::JacobianReport;
pub use losses::{LossBreakdown, LossWeights, SsimParams};
pub use metrics::MetricReport;
pub use optimizer::{register, RegistrationConfig, RegistrationResult};
pub use volume::{Dims, MaskVolume, Volume};
pub use warp::DisplacementField;
