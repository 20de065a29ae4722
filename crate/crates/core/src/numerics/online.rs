//! Joint softmax attention over several key/value blocks, each with its own
//! score multiplier. The fused kernel streams key tiles, keeping a running
//! row maximum and normalizer, and never materializes the full score matrix.

use super::tensor::{exp_nonpositive, matmul, matmul_rows, matmul_transposed, softmax_rows};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// One key/value block. Scores against this block are
/// `scale · q·kᵀ / √d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock<'a> {
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
    pub scale: f32,
}

impl<'a> AttentionBlock<'a> {
    pub fn new(keys: &'a Tensor, values: &'a Tensor, scale: f32) -> Self {
        Self {
            keys,
            values,
            scale,
        }
    }
}

fn check_blocks(q: &Tensor, blocks: &[AttentionBlock<'_>]) -> Result<(usize, usize, usize)> {
    let (t, d) = q.dims2()?;
    let first = blocks.first().ok_or(Error::EmptyBlocks)?;
    let dv = first.values.dims2()?.1;
    for (i, b) in blocks.iter().enumerate() {
        let (nk, dk) = b.keys.dims2()?;
        let (nv, dvi) = b.values.dims2()?;
        if dk != d || nk != nv || dvi != dv {
            return Err(shape_err(
                "online_mixed_attention",
                format!("block {i}: keys [{nk}x{dk}], values [{nv}x{dvi}], query width {d}, value width {dv}"),
            ));
        }
    }
    Ok((t, d, dv))
}

/// Fused single-pass evaluation of
/// `softmax([s₁·q·k₁ᵀ, s₂·q·k₂ᵀ, …] / √d) · [v₁; v₂; …]`.
pub fn online_mixed_attention(q: &Tensor, blocks: &[AttentionBlock<'_>]) -> Result<Tensor> {
    const TILE: usize = 128;
    let (t, d, dv) = check_blocks(q, blocks)?;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut running_max = vec![f64::NEG_INFINITY; t];
    let mut normalizer = vec![0f64; t];
    let mut acc = vec![0f64; t * dv];
    let mut tile_t = Vec::with_capacity(d * TILE);
    let mut scores = Vec::with_capacity(t * TILE);
    let mut weights: Vec<f32> = Vec::with_capacity(t * TILE);

    for b in blocks {
        let n = b.keys.shape()[0];
        let s = f64::from(b.scale) * inv_sqrt_d;
        for j0 in (0..n).step_by(TILE) {
            let jn = TILE.min(n - j0);
            tile_t.clear();
            for p in 0..d {
                tile_t.extend((j0..j0 + jn).map(|j| b.keys.row(j)[p]));
            }
            scores.clear();
            matmul_rows(q.data(), &tile_t, t, d, jn, |row| {
                scores.extend(row.iter().map(|&x| x * s));
            });

            weights.clear();
            for i in 0..t {
                let row = &scores[i * jn..(i + 1) * jn];
                let tile_max = lane_max(row);
                if tile_max > running_max[i] {
                    let rescale = (running_max[i] - tile_max).exp();
                    normalizer[i] *= rescale;
                    acc[i * dv..(i + 1) * dv].iter_mut().for_each(|a| *a *= rescale);
                    running_max[i] = tile_max;
                }
                let m = running_max[i];
                let start = weights.len();
                weights.extend(row.iter().map(|&x| exp_nonpositive((x - m) as f32)));
                normalizer[i] += lane_sum(&weights[start..]);
            }
            // Weights come out of an f32 exp, so the tile product can take
            // them as f32 without losing anything.
            let v_tile = &b.values.data()[j0 * dv..(j0 + jn) * dv];
            let mut acc_rows = acc.chunks_exact_mut(dv.max(1));
            matmul_rows(&weights, v_tile, t, jn, dv, |row| {
                if let Some(a) = acc_rows.next() {
                    a.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                }
            });
        }
    }

    if normalizer.contains(&0.0) {
        return Err(shape_err("online_mixed_attention", "all blocks are empty"));
    }
    let out = acc
        .chunks_exact(dv.max(1))
        .zip(&normalizer)
        .flat_map(|(row, &z)| row.iter().map(move |&a| (a / z) as f32))
        .collect();
    Tensor::new(&[t, dv], out)
}

// Four independent lanes keep the reductions off a single dependency chain.

fn lane_max(xs: &[f64]) -> f64 {
    let mut m = [f64::NEG_INFINITY; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for (m, &x) in m.iter_mut().zip(c) {
            *m = m.max(x);
        }
    }
    let tail = chunks.remainder().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m.into_iter().fold(tail, f64::max)
}

fn lane_sum(xs: &[f32]) -> f64 {
    let mut s = [0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for (s, &x) in s.iter_mut().zip(c) {
            *s += f64::from(x);
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&x| f64::from(x)).sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Reference path: materialize every scaled score block, concatenate,
/// row-softmax, and multiply by the stacked values.
pub fn materialized_mixed_attention(q: &Tensor, blocks: &[AttentionBlock<'_>]) -> Result<Tensor> {
    let (t, d, _) = check_blocks(q, blocks)?;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let total: usize = blocks.iter().map(|b| b.keys.shape()[0]).sum();
    let mut scores = vec![0f32; t * total];
    let mut offset = 0;
    for b in blocks {
        let n = b.keys.shape()[0];
        let block = matmul_transposed(q, b.keys)?;
        let s = b.scale * inv_sqrt_d;
        for i in 0..t {
            for j in 0..n {
                scores[i * total + offset + j] = s * block.data()[i * n + j];
            }
        }
        offset += n;
    }
    let weights = softmax_rows(&Tensor::new(&[t, total], scores)?)?;
    let values: Vec<&Tensor> = blocks.iter().map(|b| b.values).collect();
    matmul(&weights, &Tensor::vstack(&values)?)
}
