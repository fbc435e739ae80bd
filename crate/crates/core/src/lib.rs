//! Two-stage volumetric MRI denoising.
//!
//! Stage one is an overcomplete patch-based residual 3D CNN that predicts the
//! noise content of locally standardized 12^3 patches; subtracting the
//! aggregated prediction yields a prefiltered volume and a residual noise
//! map. Stage two filters the original noisy volume with a rotationally
//! invariant non-local means whose similarity weights come from the
//! prefiltered guide. Rician-specific noise-field correction and bias removal
//! slot between the stages for magnitude MR images.
//!
//! The crate also ships the supporting cast: synthetic phantoms and seeded
//! noise synthesis, PSNR/SSIM/RMSE quality metrics, and NIfTI-1/raw volume
//! I/O.

pub mod cnn;
pub mod error;
pub mod io;
pub mod metrics;
pub mod noisegen;
pub mod pbcnn;
pub mod rinlm;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Mask, MomentMaps, PatchGrid, Volume};
