//! The toy transformer backbone `F_θ(z_t, t, p)`: every latent cell is a
//! token; timestep and prompt embeddings are added to every token; each
//! layer runs pre-norm self-attention under an [`AttentionControl`] and a
//! pre-norm MLP; a linear head maps back to latent channels.
//!
//! [`AttentionControl`]: crate::style::AttentionControl

mod config;
mod embed;
mod forward;
mod weights;

pub use config::DenoiserConfig;
pub use embed::{embed_prompt, embed_timestep, fnv1a64, prompt_slot};
pub use forward::{forward, Capture, FeatureTaps, Injection};
pub use weights::{DenoiserWeights, LayerWeights};
