use crate::error::{Error, Result};

use super::embed::fnv1a64;

/// Shape hyperparameters of the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DenoiserConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_slots: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            channels: 4,
            model_dim: 64,
            heads: 4,
            layers: 4,
            vocab_slots: 4096,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("vocab_slots", self.vocab_slots),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (self.grid_h, self.grid_w, self.channels)
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// FNV-1a over the little-endian u64 encoding of every field, in
    /// declaration order.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(56);
        for v in [
            self.grid_h,
            self.grid_w,
            self.channels,
            self.model_dim,
            self.heads,
            self.layers,
            self.vocab_slots,
        ] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}
