//! End-to-end flow: capture style statistics from a noised style latent,
//! generate with the statistics injected at every sampling step, and the
//! toy metrics and probes used to compare attention controls.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::denoiser::{embed_prompt, forward, Capture, DenoiserWeights, FeatureTaps, Injection};
use crate::diffusion::{add_noise, lcm_trajectory, Denoise, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::latent::LatentGrid;
use crate::numerics::{gaussian, moments, pca_top3, stream, Rng, Tensor};
use crate::style::{AttentionControl, ControlMode, LayerStatistics, StyleStatistics};

pub const DEFAULT_EXTRACTION_TIMESTEP: usize = 200;
pub const DEFAULT_STEPS: usize = 6;
/// Extraction timesteps swept by the timestep probe.
pub const PROBE_TIMESTEPS: [usize; 6] = [0, 100, 200, 300, 400, 500];
/// Step counts swept by the step probe.
pub const PROBE_STEPS: [usize; 5] = [1, 2, 4, 6, 8];

/// How a style latent is noised and captured.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionParams {
    pub timestep: usize,
    pub prompt: String,
    pub seed: u64,
    pub style_id: String,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            timestep: DEFAULT_EXTRACTION_TIMESTEP,
            prompt: String::new(),
            seed: 0,
            style_id: String::new(),
        }
    }
}

/// Noise `style_latent` to `params.timestep` and run one plain forward pass,
/// keeping every layer's keys, values and feature moments.
pub fn extract_style_statistics(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    params: &ExtractionParams,
) -> Result<StyleStatistics> {
    let t = params.timestep;
    schedule.check_timestep(t)?;
    let (h, w, c) = style_latent.dims();
    let mut rng = Rng::derive(params.seed, stream::STYLE_NOISE);
    let eps = LatentGrid::from_tensor(gaussian(&mut rng, &[h, w, c]))?;
    let noisy = add_noise(schedule, style_latent, t, &eps)?;
    let prompt = embed_prompt(&params.prompt, weights);
    let (_, taps) = forward(
        weights,
        &noisy,
        t,
        &prompt,
        &Injection::none(),
        Capture::Features,
    )?;
    let layers = taps
        .features
        .iter()
        .zip(taps.keys)
        .zip(taps.values)
        .map(|((f, k), v)| {
            let (mu, sigma) = moments(f)?;
            LayerStatistics::new(k, v, mu, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleStatistics::new(
        weights.config().fingerprint(),
        t as u32,
        params.style_id.clone(),
        layers,
    ))
}

/// Re-capture statistics at every sampling timestep instead of reusing one
/// capture.
#[derive(Clone, Copy, Debug)]
pub struct PerStepExtraction<'a> {
    pub style_latent: &'a LatentGrid,
    pub prompt: &'a str,
    pub seed: u64,
}

/// One stylized generation.
#[derive(Clone, Debug)]
pub struct GenerationRequest<'a> {
    pub prompt: String,
    pub style: Option<&'a StyleStatistics>,
    pub steps: usize,
    pub control: AttentionControl,
    pub seed: u64,
    /// Restrict injection to these layers; `None` injects everywhere.
    pub layers: Option<Vec<usize>>,
    /// When set, statistics are re-extracted at each sampling timestep and
    /// `style` is ignored.
    pub per_step: Option<PerStepExtraction<'a>>,
}

impl<'a> GenerationRequest<'a> {
    /// Six steps, NMSA with λ = 1.
    pub fn new(prompt: impl Into<String>, style: Option<&'a StyleStatistics>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            style,
            steps: DEFAULT_STEPS,
            control: AttentionControl::default(),
            seed,
            layers: None,
            per_step: None,
        }
    }

    pub fn with_control(mut self, control: AttentionControl) -> Self {
        self.control = control;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Final latent plus the taps of the last sampling step.
#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: LatentGrid,
    pub final_taps: FeatureTaps,
}

struct ConditionedDenoiser<'a> {
    weights: &'a DenoiserWeights,
    schedule: &'a NoiseSchedule,
    prompt: Tensor,
    control: AttentionControl,
    style: Option<&'a StyleStatistics>,
    layers: Option<&'a [usize]>,
    per_step: Option<PerStepExtraction<'a>>,
    last_taps: RefCell<FeatureTaps>,
}

impl Denoise for ConditionedDenoiser<'_> {
    fn denoise(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let refreshed;
        let style = match (&self.per_step, self.control.mode().needs_style()) {
            (Some(p), true) => {
                refreshed = extract_style_statistics(
                    self.weights,
                    self.schedule,
                    p.style_latent,
                    &ExtractionParams {
                        timestep: t,
                        prompt: p.prompt.to_string(),
                        seed: p.seed,
                        style_id: String::new(),
                    },
                )?;
                Some(&refreshed)
            }
            _ => self.style,
        };
        let mut injection = Injection::new(self.control, style);
        if let Some(ls) = self.layers {
            injection = injection.with_layers(ls);
        }
        let (pred, taps) = forward(self.weights, z, t, &self.prompt, &injection, Capture::Features)?;
        *self.last_taps.borrow_mut() = taps;
        Ok(pred)
    }
}

/// Few-step consistency sampling with the request's control active in every
/// forward pass.
pub fn generate(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    req: &GenerationRequest<'_>,
) -> Result<LatentGrid> {
    generate_traced(weights, schedule, req).map(|g| g.latent)
}

pub fn generate_traced(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    req: &GenerationRequest<'_>,
) -> Result<Generation> {
    if req.steps == 0 {
        return Err(Error::OutOfRange {
            what: "steps",
            value: "0".into(),
            range: ">= 1".into(),
        });
    }
    let mode = req.control.mode();
    if mode.needs_style() && req.style.is_none() && req.per_step.is_none() {
        return Err(Error::MissingStyle(mode.name()));
    }
    let net = ConditionedDenoiser {
        weights,
        schedule,
        prompt: embed_prompt(&req.prompt, weights),
        control: req.control,
        style: req.style,
        layers: req.layers.as_deref(),
        per_step: req.per_step,
        last_taps: RefCell::new(FeatureTaps::default()),
    };
    let mut steps = lcm_trajectory(
        &net,
        schedule,
        weights.config().latent_dims(),
        req.seed,
        req.steps,
    )?;
    Ok(Generation {
        latent: steps.pop().expect("at least one step").estimate,
        final_taps: net.last_taps.into_inner(),
    })
}

/// Negative mean over layers of the per-channel squared distance between
/// generated and style feature moments:
/// `−mean_l (‖μ_gen − μ_s‖² + ‖σ_gen − σ_s‖²) / model_dim`. Zero is best.
pub fn style_score(gen_taps: &FeatureTaps, style: &StyleStatistics) -> Result<f64> {
    let layers = style.layers();
    if gen_taps.features.len() != layers.len() || layers.is_empty() {
        return Err(shape_err(
            "style_score",
            format!("{} tapped layers vs {} style layers", gen_taps.features.len(), layers.len()),
        ));
    }
    let mut total = 0.0;
    for (f, s) in gen_taps.features.iter().zip(layers) {
        let (mu, sigma) = moments(f)?;
        if mu.numel() != s.mu().numel() {
            return Err(shape_err(
                "style_score",
                format!("{} channels vs {}", mu.numel(), s.mu().numel()),
            ));
        }
        let sq = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum()
        };
        total += (sq(&mu, s.mu()) + sq(&sigma, s.sigma())) / mu.numel() as f64;
    }
    Ok(-total / layers.len() as f64)
}

/// Cosine similarity of the flattened latents.
pub fn content_score(z_gen: &LatentGrid, z_baseline: &LatentGrid) -> Result<f64> {
    if !z_gen.same_shape(z_baseline) {
        return Err(shape_err(
            "content_score",
            format!("{:?} vs {:?}", z_gen.dims(), z_baseline.dims()),
        ));
    }
    Ok(cosine(z_gen.data(), z_baseline.data()))
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

fn concat_features(taps: &FeatureTaps) -> Vec<f32> {
    taps.features.iter().flat_map(|f| f.data().iter().copied()).collect()
}

/// Cosine similarity between the concatenated layer features of the clean
/// latent (at timestep 0) and of the latent noised to each `t`, averaged
/// over `seeds`.
pub fn probe_noise_similarity(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    prompt: &str,
    t_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>> {
    for &t in t_list {
        schedule.check_timestep(t)?;
    }
    if seeds.is_empty() {
        return Err(shape_err("probe_noise_similarity", "no seeds"));
    }
    let emb = embed_prompt(prompt, weights);
    let (_, clean) = forward(weights, style_latent, 0, &emb, &Injection::none(), Capture::Features)?;
    let clean = concat_features(&clean);
    let (h, w, c) = style_latent.dims();
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = Rng::derive(seed, stream::PROBE);
            let eps = LatentGrid::from_tensor(gaussian(&mut rng, &[h, w, c]))?;
            t_list
                .iter()
                .map(|&t| {
                    let noisy = add_noise(schedule, style_latent, t, &eps)?;
                    let (_, taps) =
                        forward(weights, &noisy, t, &emb, &Injection::none(), Capture::Features)?;
                    Ok(cosine(&clean, &concat_features(&taps)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(t_list
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mean = per_seed.iter().map(|s| s[i]).sum::<f64>() / seeds.len() as f64;
            (t, mean)
        })
        .collect())
}

/// One generation's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub control: ControlMode,
    pub lambda: f32,
    pub seed: u64,
    pub style_score: f64,
    pub content_score: f64,
    pub runtime_ms: f64,
}

pub const METRICS_HEADER: &str = "control,lambda,seed,style_score,content_score,runtime_ms";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{},{:.6},{:.6},{:.6}",
            self.control, self.lambda, self.seed, self.style_score, self.content_score, self.runtime_ms
        )
    }
}

/// CSV text: `#`-prefixed comment lines, the header, then one line per row.
pub fn metrics_csv(rows: &[MetricsRow], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Settings shared by the ablation and sweeps. `prompt` conditions both the
/// style capture and the generations.
#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub prompt: String,
    pub lambda: f32,
    pub steps: usize,
    pub extraction_timestep: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            lambda: 1.0,
            steps: DEFAULT_STEPS,
            extraction_timestep: DEFAULT_EXTRACTION_TIMESTEP,
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64() * 1e3))
}

fn ablate_seed(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    settings: &AblationSettings,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let stats = extract_style_statistics(
        weights,
        schedule,
        style_latent,
        &ExtractionParams {
            timestep: settings.extraction_timestep,
            prompt: settings.prompt.clone(),
            seed,
            style_id: String::new(),
        },
    )?;
    let run = |mode: ControlMode| -> Result<(Generation, f64)> {
        let control = AttentionControl::new(mode, settings.lambda)?;
        let req = GenerationRequest::new(settings.prompt.clone(), Some(&stats), seed)
            .with_control(control)
            .with_steps(settings.steps);
        timed(|| generate_traced(weights, schedule, &req))
    };
    let (baseline, base_ms) = run(ControlMode::None)?;
    ControlMode::ALL
        .iter()
        .map(|&mode| {
            let (g, ms) = if mode == ControlMode::None {
                (baseline.clone(), base_ms)
            } else {
                run(mode)?
            };
            Ok(MetricsRow {
                control: mode,
                lambda: settings.lambda,
                seed,
                style_score: style_score(&g.final_taps, &stats)?,
                content_score: content_score(&g.latent, &baseline.latent)?,
                runtime_ms: ms,
            })
        })
        .collect()
}

/// Generate under every control (plain baseline included) for each seed.
/// Each seed captures its own statistics with that seed's noise. Rows come
/// back ordered by control, then by seed.
pub fn ablate(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    settings: &AblationSettings,
    seeds: &[u64],
) -> Result<Vec<MetricsRow>> {
    if seeds.is_empty() {
        return Err(shape_err("ablate", "no seeds"));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&s| ablate_seed(weights, schedule, style_latent, settings, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(seeds.len() * ControlMode::ALL.len());
    for k in 0..ControlMode::ALL.len() {
        rows.extend(per_seed.iter().map(|r| r[k].clone()));
    }
    Ok(rows)
}

/// Mean scores for one point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// Extraction timestep or step count, depending on the sweep.
    pub value: usize,
    pub style_score: f64,
    pub content_score: f64,
    /// Feature similarity of clean vs noised style latent (timestep sweep
    /// only).
    pub similarity: Option<f64>,
    pub runtime_ms: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Stylize at each extraction timestep with `control` and report mean
/// scores over `seeds`, plus the clean/noised feature similarity.
pub fn sweep_extraction_timestep(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    settings: &AblationSettings,
    control: AttentionControl,
    t_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let sims = probe_noise_similarity(weights, schedule, style_latent, &settings.prompt, t_list, seeds)?;
    t_list
        .iter()
        .zip(sims)
        .map(|(&t, (_, sim))| {
            let per_seed = seeds
                .par_iter()
                .map(|&seed| {
                    let stats = extract_style_statistics(
                        weights,
                        schedule,
                        style_latent,
                        &ExtractionParams {
                            timestep: t,
                            prompt: settings.prompt.clone(),
                            seed,
                            style_id: String::new(),
                        },
                    )?;
                    let base = GenerationRequest::new(settings.prompt.clone(), None, seed)
                        .with_control(AttentionControl::none())
                        .with_steps(settings.steps);
                    let baseline = generate(weights, schedule, &base)?;
                    let req = GenerationRequest::new(settings.prompt.clone(), Some(&stats), seed)
                        .with_control(control)
                        .with_steps(settings.steps);
                    let (g, ms) = timed(|| generate_traced(weights, schedule, &req))?;
                    Ok((
                        style_score(&g.final_taps, &stats)?,
                        content_score(&g.latent, &baseline)?,
                        ms,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                value: t,
                style_score: mean(per_seed.iter().map(|r| r.0)),
                content_score: mean(per_seed.iter().map(|r| r.1)),
                similarity: Some(sim),
                runtime_ms: mean(per_seed.iter().map(|r| r.2)),
            })
        })
        .collect()
}

/// Stylize with each step count and report mean scores over `seeds`. The
/// content baseline uses the same step count without injection.
pub fn sweep_steps(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    style_latent: &LatentGrid,
    settings: &AblationSettings,
    control: AttentionControl,
    step_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let stats: Vec<StyleStatistics> = seeds
        .par_iter()
        .map(|&seed| {
            extract_style_statistics(
                weights,
                schedule,
                style_latent,
                &ExtractionParams {
                    timestep: settings.extraction_timestep,
                    prompt: settings.prompt.clone(),
                    seed,
                    style_id: String::new(),
                },
            )
        })
        .collect::<Result<_>>()?;
    step_list
        .iter()
        .map(|&steps| {
            let per_seed = seeds
                .par_iter()
                .zip(&stats)
                .map(|(&seed, st)| {
                    let base = GenerationRequest::new(settings.prompt.clone(), None, seed)
                        .with_control(AttentionControl::none())
                        .with_steps(steps);
                    let baseline = generate(weights, schedule, &base)?;
                    let req = GenerationRequest::new(settings.prompt.clone(), Some(st), seed)
                        .with_control(control)
                        .with_steps(steps);
                    let (g, ms) = timed(|| generate_traced(weights, schedule, &req))?;
                    Ok((
                        style_score(&g.final_taps, st)?,
                        content_score(&g.latent, &baseline)?,
                        ms,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                value: steps,
                style_score: mean(per_seed.iter().map(|r| r.0)),
                content_score: mean(per_seed.iter().map(|r| r.1)),
                similarity: None,
                runtime_ms: mean(per_seed.iter().map(|r| r.2)),
            })
        })
        .collect()
}

/// Top-3 principal components of layer `layer`'s features, each min-max
/// scaled to `[0, 1]` and laid out on the `grid_h × grid_w` token grid.
/// Components with (numerically) zero range map to 0.
pub fn pca_feature_image(
    taps: &FeatureTaps,
    layer: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<LatentGrid> {
    let f = taps.features.get(layer).ok_or_else(|| Error::OutOfRange {
        what: "layer",
        value: layer.to_string(),
        range: format!("0..{}", taps.features.len()),
    })?;
    let n = f.dims2()?.0;
    if n != grid_h * grid_w {
        return Err(shape_err(
            "pca_feature_image",
            format!("{n} tokens for a {grid_h}x{grid_w} grid"),
        ));
    }
    let p = pca_top3(f)?;
    let ranges: Vec<(f32, f32)> = (0..3)
        .map(|k| {
            (0..n).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), i| {
                let v = p.row(i)[k];
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    let widest = ranges.iter().map(|(lo, hi)| hi - lo).fold(0.0, f32::max);
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            let range = hi - lo;
            if range <= widest * 1e-5 || range == 0.0 {
                out.push(0.0);
            } else {
                out.push(((p.row(i)[k] - lo) / range).clamp(0.0, 1.0));
            }
        }
    }
    LatentGrid::new(grid_h, grid_w, 3, out)
}
