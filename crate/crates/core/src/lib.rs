//! Toy-scale coarse-to-fine audio-driven character animation.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape used by every trainable component
//! - [`codec`], [`io`]: invertible space-to-depth latent codec and file formats
//! - [`flow`]: flow-matching interpolation, loss, Euler sampler and guidance
//! - [`backbone`]: transformer velocity predictor with decoupled text/audio
//!   cross-attention
//! - [`pose`]: keypoint rasterisation, patchification and latent fusion
//! - [`refiner`]: degradation, prefix-latent noising, masked loss, chunked
//!   long-video generation
//! - [`reward`]: hand reward models and reward-feedback fine-tuning
//! - [`world`]: procedural scenes with exact ground truth
//! - [`eval`]: metrics and reports

pub mod autodiff;
pub mod backbone;
pub mod codec;
pub mod eval;
pub mod error;
pub mod flow;
pub mod io;
pub mod params;
pub mod pose;
pub mod reward;
pub mod refiner;
pub mod train;
pub mod world;

pub use error::{Error, Result};
