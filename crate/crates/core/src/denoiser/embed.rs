use crate::numerics::Tensor;

use super::DenoiserWeights;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Embedding-table row for one (already lowercased) token.
pub fn prompt_slot(token: &str, vocab_slots: usize) -> usize {
    (fnv1a64(token.as_bytes()) % vocab_slots as u64) as usize
}

/// Mean of the table rows of the lowercased, whitespace-split tokens; the
/// zero vector for an empty prompt.
pub fn embed_prompt(text: &str, weights: &DenoiserWeights) -> Tensor {
    let dim = weights.config().model_dim;
    let slots = weights.config().vocab_slots;
    let lowered = text.to_lowercase();
    let mut acc = vec![0f64; dim];
    let mut count = 0usize;
    for token in lowered.split_whitespace() {
        let row = weights.prompt_table().row(prompt_slot(token, slots));
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
        count += 1;
    }
    let data = if count == 0 {
        vec![0.0; dim]
    } else {
        acc.iter().map(|a| (a / count as f64) as f32).collect()
    };
    Tensor::new(&[dim], data).expect("model_dim entries")
}

/// Sinusoidal embedding, `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]` with
/// frequencies geometric from 1 down to 1/10000. An odd trailing slot is 0.
pub fn embed_timestep(t: usize, model_dim: usize) -> Tensor {
    let half = model_dim / 2;
    let mut data = vec![0f32; model_dim];
    for i in 0..half {
        let freq = if half > 1 {
            10000f64.powf(-(i as f64) / (half - 1) as f64)
        } else {
            1.0
        };
        let arg = t as f64 * freq;
        data[2 * i] = arg.sin() as f32;
        data[2 * i + 1] = arg.cos() as f32;
    }
    Tensor::new(&[model_dim], data).expect("model_dim entries")
}
