//! Generative latent optimization with a classification regularizer.
//!
//! The library trains a small generative model jointly with per-example
//! latent codes on the unit hypersphere, synthesizes new class-conditional
//! images by spherical interpolation between learned codes, and uses those
//! images to augment the training of a downstream classifier in the
//! small-sample regime.
//!
//! Entry points:
//! - [`latent`] — the latent codebook and its geometry (slerp, lerp,
//!   partner sampling, noise concatenation),
//! - [`models`] — generator, classifiers and the frozen perceptual feature
//!   extractor,
//! - [`loss`] — perceptual reconstruction loss and classification variants,
//! - [`train`] — the joint optimization loop with transductive support,
//! - [`sample`] — synthetic-image sampling and the augmentation policy,
//! - [`data`] — dataset ingestion, reproducible small-sample splits and
//!   standard augmentation,
//! - [`eval`] — downstream classifier training, seed aggregation and FID.

pub mod archive;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod rng;

pub mod latent;
pub mod loss;
pub mod optim;
pub mod train;
pub mod models;

pub use error::{Error, Result};
