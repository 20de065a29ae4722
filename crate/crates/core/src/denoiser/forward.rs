use crate::error::{shape_err, Result};
use crate::latent::LatentGrid;
use crate::numerics::{exp_nonpositive, matmul, Tensor};
use crate::style::{apply_control, AttentionControl, LayerProjections, StyleStatistics};

use super::{embed_timestep, DenoiserWeights};

const NORM_EPS: f64 = 1e-5;

/// What the forward pass should record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    Off,
    /// Per-layer features, keys, values and residual outputs.
    Features,
    /// [`Capture::Features`] plus plain self-attention weights.
    Debug,
}

/// Per-layer activations recorded during a forward pass. Empty unless
/// capture was requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTaps {
    /// Normalized features fed to the Q/K/V projections, `[tokens, dim]`
    /// (after AdaIN when it was applied).
    pub features: Vec<Tensor>,
    /// `[heads, tokens, head_dim]`.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Residual stream after each layer, `[tokens, dim]`.
    pub residual: Vec<Tensor>,
    /// `[heads, tokens, tokens]` per layer under [`Capture::Debug`]; only
    /// layers that ran plain self-attention contribute.
    pub attention: Vec<Tensor>,
}

impl FeatureTaps {
    pub fn layer_count(&self) -> usize {
        self.features.len()
    }
}

/// Style injection applied inside the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub control: AttentionControl,
    pub style: Option<&'a StyleStatistics>,
    /// Restrict injection to these layer indices; `None` means every layer.
    pub layers: Option<&'a [usize]>,
}

impl<'a> Injection<'a> {
    pub fn none() -> Self {
        Self {
            control: AttentionControl::none(),
            style: None,
            layers: None,
        }
    }

    pub fn new(control: AttentionControl, style: Option<&'a StyleStatistics>) -> Self {
        Self {
            control,
            style,
            layers: None,
        }
    }

    pub fn with_layers(mut self, layers: &'a [usize]) -> Self {
        self.layers = Some(layers);
        self
    }

    fn control_at(&self, layer: usize) -> AttentionControl {
        match self.layers {
            Some(ls) if !ls.contains(&layer) => AttentionControl::none(),
            _ => self.control,
        }
    }
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push(((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32);
        }
    }
    Tensor::new(&[n, d], out)
}

fn gelu(x: f32) -> f32 {
    let c = (2.0 / std::f32::consts::PI).sqrt();
    let u = c * (x + 0.044_715 * x * x * x);
    let e = exp_nonpositive(-2.0 * u.abs());
    let tanh = ((1.0 - e) / (1.0 + e)).copysign(u);
    0.5 * x * (1.0 + tanh)
}

/// `F_θ(z_t, t, p)` under a style injection.
///
/// Returns the prediction (same shape as `z`) and the taps requested by
/// `capture`. Capturing never changes the prediction.
pub fn forward(
    weights: &DenoiserWeights,
    z: &LatentGrid,
    t: usize,
    prompt_emb: &Tensor,
    injection: &Injection<'_>,
    capture: Capture,
) -> Result<(LatentGrid, FeatureTaps)> {
    let cfg = weights.config();
    if z.dims() != cfg.latent_dims() {
        return Err(shape_err(
            "forward",
            format!("latent {:?}, model expects {:?}", z.dims(), cfg.latent_dims()),
        ));
    }
    if prompt_emb.numel() != cfg.model_dim {
        return Err(shape_err(
            "forward",
            format!("prompt embedding has {} entries, model_dim {}", prompt_emb.numel(), cfg.model_dim),
        ));
    }
    let injecting = (0..cfg.layers).any(|l| injection.control_at(l).mode().needs_style());
    if injecting {
        if let Some(style) = injection.style {
            style.check_compatible(cfg)?;
        }
    }

    let temb = embed_timestep(t, cfg.model_dim);
    let mut x = matmul(&z.tokens(), weights.input())?;
    {
        let d = cfg.model_dim;
        let cond: Vec<f32> = temb
            .data()
            .iter()
            .zip(prompt_emb.data())
            .map(|(a, b)| a + b)
            .collect();
        for row in x.data_mut().chunks_exact_mut(d) {
            for (v, c) in row.iter_mut().zip(&cond) {
                *v += c;
            }
        }
    }

    let mut taps = FeatureTaps::default();
    let recording = capture != Capture::Off;
    for (l, lw) in weights.layers().iter().enumerate() {
        let control = injection.control_at(l);
        let f = layer_norm(&x, &lw.attn_norm_gain, &lw.attn_norm_bias)?;
        let proj = LayerProjections {
            query: &lw.query,
            key: &lw.key,
            value: &lw.value,
            heads: cfg.heads,
        };
        let out = apply_control(
            &control,
            l,
            &f,
            &proj,
            injection.style,
            capture == Capture::Debug,
        )?;
        x.add_assign(&matmul(&out.attended, &lw.out)?)?;

        let h = layer_norm(&x, &lw.mlp_norm_gain, &lw.mlp_norm_bias)?;
        let hidden = matmul(&h, &lw.mlp_in)?.map(gelu);
        x.add_assign(&matmul(&hidden, &lw.mlp_out)?)?;

        if recording {
            taps.features.push(out.features);
            taps.keys.push(out.keys);
            taps.values.push(out.values);
            taps.residual.push(x.clone());
            if let Some(w) = out.weights {
                taps.attention.push(w);
            }
        }
    }

    let pred = matmul(&x, weights.output())?;
    Ok((LatentGrid::from_tokens(cfg.grid_h, cfg.grid_w, pred)?, taps))
}
