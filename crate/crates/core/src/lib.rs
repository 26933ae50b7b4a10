//! Semi-supervised density regression with Gaussian-process pseudo labels.
//!
//! A small encoder/decoder predicts per-pixel density maps from images. On
//! unlabeled images, the encoder's latent is compared against a bank of
//! labeled latents, and a GP posterior over the nearest neighbors supplies
//! both a pseudo ground-truth density and a variance that weights the loss.

pub mod config;
pub mod density;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
