//! Speech-driven talking-head generation via latent-space trajectories.
//!
//! The pipeline maps speech audio to per-frame displacement trajectories in
//! the latent space of a pluggable image generator: an identity image is
//! inverted into the generator's extended latent space, audio is encoded by
//! a recurrent network, and a decoder predicts per-frame displacements
//! constrained to a PCA subspace of inverted latent codes. Training runs in
//! two stages: trajectory learning against inverted targets, then per-subject
//! generator tuning around fixed pivot latents.
//!
//! The workspace ships an analytically invertible toy generator/encoder pair
//! so the full pipeline, both training stages and all four evaluation metrics
//! (PSNR, SSIM, LMD, FID) run at desk scale without external weights.

pub mod archive;
pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
