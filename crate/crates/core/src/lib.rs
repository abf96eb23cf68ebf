//! Simulation, two-stage diffusion denoising and evaluation of single-particle
//! cryo-EM images.
//!
//! The crate is organized along the workflow:
//!
//! * [`mrc`] reads and writes MRC2014 volumes and particle stacks.
//! * [`simulate`] projects a density map at random orientations and adds
//!   Gaussian white noise, producing paired (noisy, clean) datasets.
//! * [`diffusion`] holds the noise schedule, the ε-prediction objective and the
//!   conditional ancestral sampler.
//! * [`postprocess`] is the lightweight refinement network applied to the
//!   diffusion output.
//! * [`metrics`], [`recon`] and [`baselines`] evaluate results: MSE/PSNR/SSIM,
//!   known-pose Fourier reconstruction and Fourier shell correlation.

pub mod baselines;
pub mod checkpoint;
pub mod diffusion;
mod error;
pub mod fft;
pub mod map;
pub mod metrics;
pub mod mrc;
pub mod nn;
pub mod phantom;
pub mod postprocess;
pub mod recon;
pub mod simulate;

pub use error::{Error, Result};
pub use map::{DensityMap, Image2D, ImageMeta, ImageStack};
