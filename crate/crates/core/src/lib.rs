//! Training-free stylized generation on a desk-scale latent consistency
//! model.
//!
//! A style latent is noised once and passed through the denoiser to capture
//! per-layer keys, values and feature moments ([`style::StyleStatistics`]).
//! Those statistics are then injected into the self-attention of every
//! layer during few-step consistency sampling, using one of the
//! [`style::ControlMode`] mechanisms. The default, norm mixture of
//! self-attention, renormalizes content features to the style moments and
//! softmaxes content and λ-scaled style scores jointly.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod latent;
pub mod numerics;
pub mod pipeline;
pub mod style;

pub use error::{Error, Result};
pub use latent::LatentGrid;
