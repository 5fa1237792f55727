//! Joint event-camera and RGB transmission over a noisy channel.
//!
//! Blurry images and event streams are split into image-specific,
//! event-specific and shared latents, priced by learned entropy models,
//! mapped to a variable number of channel symbols per latent vector, sent
//! over an AWGN channel and decoded into reconstructions of both sources
//! plus a deblurred image.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod event;
pub mod metrics;
pub mod pipeline;
pub mod rate_alloc;
pub mod scene;
pub mod transforms;

pub use error::{Error, Result};
