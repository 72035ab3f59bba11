//! X-ray in-depth decomposition.
//!
//! Simulates digitally reconstructed radiographs (DRRs) of synthetic
//! attenuation volumes clipped into coronal slabs, trains a U-Net-style
//! network that splits one projection into the projections of the slabs,
//! and scores the result with PSNR and SSIM.

pub mod dataset;
pub mod error;
pub mod formats;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndtensor;
pub mod phantom;
pub mod projection;
pub mod selfcheck;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
