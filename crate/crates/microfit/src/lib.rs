//! Diffusion-MRI microstructure fitting toolkit.
//!
//! Implements two forward signal models (DKI and the three-compartment
//! VERDICT prostate model) together with three fitting strategies:
//! voxel-wise Levenberg-Marquardt least squares, a baseline self-supervised
//! MLP, and a dense self-supervised MLP with a physics decoder. Synthetic
//! prostate phantoms emulate clinical (40, 80 mT/m) and ultra-strong
//! (300 mT/m) gradient acquisitions so the whole experiment matrix runs at
//! desk scale with fixed seeds.

pub mod cli;
pub mod error;
pub mod evalstat;
pub mod models;
pub mod neurofit;
pub mod nlls;
pub mod phantom;
pub mod pipeline;
pub mod protocol;
pub mod restricted_mc;

pub use error::{Error, Result};
