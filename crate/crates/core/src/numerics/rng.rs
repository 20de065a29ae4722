//! splitmix64 stream with Box-Muller normals.
//!
//! Streams used for different purposes are derived from a run seed as
//! `seed ^ tag`, with the tags listed in [`stream`].

use super::Tensor;

/// Purpose tags XOR-ed into a seed to obtain independent streams.
pub mod stream {
    /// Denoiser weight initialization.
    pub const WEIGHTS: u64 = 0x5745_4947_4854_5331;
    /// Initial latent and re-noising draws of the sampler.
    pub const SAMPLER: u64 = 0x5341_4d50_4c45_5232;
    /// Forward-diffusion noise applied to a style latent before capture.
    pub const STYLE_NOISE: u64 = 0x5354_594c_454e_5a33;
    /// Noise used by the feature-similarity probe.
    pub const PROBE: u64 = 0x5052_4f42_454e_5a34;
}

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    cached: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached: None,
        }
    }

    /// Stream for `purpose` (one of the [`stream`] tags) under `seed`.
    pub fn derive(seed: u64, purpose: u64) -> Self {
        Self::new(seed ^ purpose)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal. Each Box-Muller pair yields the cosine branch first
    /// and caches the sine branch for the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Tensor of standard normal samples drawn in row-major order.
pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.next_gaussian() as f32).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
