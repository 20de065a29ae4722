use crate::error::Result;
use crate::numerics::{gaussian, stream, Rng, Tensor};

use super::DenoiserConfig;

/// Parameters of one transformer layer. Projection matrices are stored
/// `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub out: Tensor,
    pub mlp_norm_gain: Tensor,
    pub mlp_norm_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

/// Fixed, seed-derived parameters of the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    seed: u64,
    input: Tensor,
    output: Tensor,
    prompt_table: Tensor,
    layers: Vec<LayerWeights>,
}

fn matrix(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    gaussian(rng, &[fan_in, fan_out]).scale(1.0 / (fan_in as f32).sqrt())
}

impl DenoiserWeights {
    /// Every matrix is a standard normal draw scaled by `1/√fan_in`, taken
    /// from the weight stream of `seed` in a fixed order: input projection,
    /// then per layer Q, K, V, O, MLP in, MLP out, then the output head and
    /// the prompt table (unit scale). Norm gains start at 1, biases at 0.
    pub fn init(seed: u64, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, stream::WEIGHTS);
        let d = config.model_dim;
        let input = matrix(&mut rng, config.channels, d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Tensor::full(&[d], 1.0),
                attn_norm_bias: Tensor::zeros(&[d]),
                query: matrix(&mut rng, d, d),
                key: matrix(&mut rng, d, d),
                value: matrix(&mut rng, d, d),
                out: matrix(&mut rng, d, d),
                mlp_norm_gain: Tensor::full(&[d], 1.0),
                mlp_norm_bias: Tensor::zeros(&[d]),
                mlp_in: matrix(&mut rng, d, config.mlp_dim()),
                mlp_out: matrix(&mut rng, config.mlp_dim(), d),
            })
            .collect();
        let output = matrix(&mut rng, d, config.channels);
        let prompt_table = gaussian(&mut rng, &[config.vocab_slots, d]);
        Ok(Self {
            config,
            seed,
            input,
            output,
            prompt_table,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn prompt_table(&self) -> &Tensor {
        &self.prompt_table
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std(t: &Tensor) -> f64 {
        let n = t.numel() as f64;
        let m = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        (t.data().iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn deterministic_per_seed() {
        let c = DenoiserConfig::default();
        let a = DenoiserWeights::init(1, c).unwrap();
        assert_eq!(a, DenoiserWeights::init(1, c).unwrap());
        let b = DenoiserWeights::init(2, c).unwrap();
        assert_ne!(a.layers()[0].query, b.layers()[0].query);
        assert_ne!(a.input(), b.input());
    }

    #[test]
    fn fan_in_scaling() {
        let w = DenoiserWeights::init(5, DenoiserConfig::default()).unwrap();
        let l = &w.layers()[0];
        for (t, fan_in) in [
            (&l.query, 64),
            (&l.key, 64),
            (&l.value, 64),
            (&l.out, 64),
            (&l.mlp_in, 64),
            (&l.mlp_out, 256),
            (w.output(), 64),
        ] {
            let target = 1.0 / (fan_in as f64).sqrt();
            assert!((std(t) / target - 1.0).abs() < 0.1, "std {} vs {target}", std(t));
        }
    }
}
