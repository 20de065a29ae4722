use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nmsa_core::denoiser::{DenoiserWeights, FeatureTaps};
use nmsa_core::diffusion::NoiseSchedule;
use nmsa_core::pipeline::{
    ablate, extract_style_statistics, generate_traced, metrics_csv, pca_feature_image,
    sweep_extraction_timestep, sweep_steps, AblationSettings, ExtractionParams, Generation,
    GenerationRequest, PerStepExtraction, SweepRow,
};
use nmsa_core::style::{AttentionControl, ControlMode, StyleStatistics, MAGIC};
use nmsa_core::LatentGrid;

use crate::config::{RunConfig, SEED_ENV};
use crate::imageio::{
    decode_latent, image_to_latent, is_image, read_image, unit_grid_to_image, write_atomic,
    write_image, ImageFormat, RgbImage,
};
use crate::{Cli, Command};

/// Configuration, model and schedule shared by every subcommand.
pub struct Session {
    pub config: RunConfig,
    pub weights: DenoiserWeights,
    pub schedule: NoiseSchedule,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        let weights = DenoiserWeights::init(config.model_seed, config.denoiser)?;
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        Ok(Self {
            config,
            weights,
            schedule,
        })
    }

    fn output_path(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.config.output_dir.join(path)
        }
    }

    fn describe(&self) -> Vec<String> {
        vec![
            format!("fingerprint=0x{:016x}", self.config.denoiser.fingerprint()),
            format!("model_seed={}", self.config.model_seed),
            format!("timesteps={}", self.config.timesteps),
        ]
    }

    fn load_latent(&self, path: &Path) -> Result<LatentGrid> {
        let img = read_image(path).with_context(|| format!("reading style image {}", path.display()))?;
        let (h, w, c) = self.config.denoiser.latent_dims();
        Ok(image_to_latent(&img, h, w, c)?)
    }

    fn extract(&self, latent: &LatentGrid, t: usize, prompt: &str, seed: u64, id: &str) -> Result<StyleStatistics> {
        let params = ExtractionParams {
            timestep: t,
            prompt: prompt.to_string(),
            seed,
            style_id: id.to_string(),
        };
        Ok(extract_style_statistics(&self.weights, &self.schedule, latent, &params)?)
    }

    fn image_format(&self, requested: Option<ImageFormat>, path: &Path) -> ImageFormat {
        requested
            .or_else(|| ImageFormat::from_path(path))
            .unwrap_or(self.config.image_format)
    }
}

/// A style given on the command line: precomputed statistics or an image.
pub enum StyleInput {
    Stats(StyleStatistics),
    Image { latent: LatentGrid, id: String },
}

fn style_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_style(session: &Session, path: &Path) -> Result<StyleInput> {
    let bytes = std::fs::read(path).with_context(|| format!("reading style {}", path.display()))?;
    if bytes.starts_with(&MAGIC) {
        let stats = StyleStatistics::from_bytes(&bytes)
            .with_context(|| format!("parsing statistics {}", path.display()))?;
        stats
            .check_compatible(&session.config.denoiser)
            .with_context(|| format!("statistics {} do not fit this model", path.display()))?;
        Ok(StyleInput::Stats(stats))
    } else if is_image(&bytes) {
        Ok(StyleInput::Image {
            latent: session.load_latent(path)?,
            id: style_id(path),
        })
    } else {
        bail!("{} is neither a .nmsa statistics file nor a PPM/PNG image", path.display())
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let config = config.with_env_seed(env_seed.as_deref())?;
    let session = Session::new(config)?;
    match &cli.command {
        Command::Extract(a) => extract_cmd(&session, a),
        Command::Generate(a) => generate_cmd(&session, a),
        Command::Ablate(a) => ablate_cmd(&session, a),
        Command::ProbeTimesteps(a) => probe_timesteps_cmd(&session, a),
        Command::ProbeSteps(a) => probe_steps_cmd(&session, a),
        Command::PcaViz(a) => pca_viz_cmd(&session, a),
    }
}

fn extract_cmd(s: &Session, a: &crate::ExtractArgs) -> Result<()> {
    let latent = s.load_latent(&a.style)?;
    let t = a.timestep.unwrap_or(s.config.extract_t);
    let stats = s.extract(&latent, t, &a.prompt, a.seed, &style_id(&a.style))?;
    let out = s.output_path(&a.output);
    write_atomic(&out, &stats.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} (t={t}, {} layers)", out.display(), stats.layers().len());
    Ok(())
}

struct RunSpec<'a> {
    prompt: &'a str,
    style: Option<&'a Path>,
    control: Option<ControlMode>,
    lambda: Option<f32>,
    steps: Option<usize>,
    seed: u64,
    layers: Option<Vec<usize>>,
    per_step: bool,
}

fn run_generation(s: &Session, spec: RunSpec<'_>) -> Result<Generation> {
    let control = AttentionControl::new(
        spec.control.unwrap_or(s.config.control),
        spec.lambda.unwrap_or(s.config.lambda),
    )?;
    let needs_style = control.mode().needs_style();
    let style = match (spec.style, needs_style) {
        (Some(p), true) => Some(read_style(s, p)?),
        (None, true) => bail!("control `{}` needs a style (-s)", control.mode()),
        _ => None,
    };
    let extracted;
    let mut req = GenerationRequest::new(spec.prompt, None, spec.seed).with_control(control);
    req.steps = spec.steps.unwrap_or(s.config.steps);
    req.layers = spec.layers;
    match &style {
        Some(StyleInput::Stats(stats)) => {
            if spec.per_step {
                bail!("--per-step-style needs a style image, not precomputed statistics");
            }
            req.style = Some(stats);
        }
        Some(StyleInput::Image { latent, id }) => {
            if spec.per_step {
                req.per_step = Some(PerStepExtraction {
                    style_latent: latent,
                    prompt: spec.prompt,
                    seed: spec.seed,
                });
            } else {
                extracted = s.extract(latent, s.config.extract_t, spec.prompt, spec.seed, id)?;
                req.style = Some(&extracted);
            }
        }
        None => {}
    }
    Ok(generate_traced(&s.weights, &s.schedule, &req)?)
}

fn save_image(s: &Session, img: &RgbImage, out: &Path, format: Option<ImageFormat>, scale: usize) -> Result<PathBuf> {
    let path = s.output_path(out);
    let format = s.image_format(format, &path);
    write_image(&img.upscale(scale), &path, format).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn generate_cmd(s: &Session, a: &crate::GenerateArgs) -> Result<()> {
    let g = run_generation(
        s,
        RunSpec {
            prompt: &a.prompt,
            style: a.style.as_deref(),
            control: a.control,
            lambda: a.lambda,
            steps: a.steps,
            seed: a.seed,
            layers: a.layers.clone(),
            per_step: a.per_step_style,
        },
    )?;
    let path = save_image(s, &decode_latent(&g.latent), &a.output, a.format, a.scale)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn seeds_from(base: u64, n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        bail!("--seeds must be at least 1");
    }
    (0..n as u64)
        .map(|i| base.checked_add(i).context("seed range overflows u64"))
        .collect()
}

fn ablate_cmd(s: &Session, a: &crate::AblateArgs) -> Result<()> {
    let latent = s.load_latent(&a.style)?;
    let seeds = seeds_from(a.seed_base, a.seeds)?;
    let settings = AblationSettings {
        prompt: a.prompt.clone(),
        lambda: a.lambda.unwrap_or(s.config.lambda),
        steps: s.config.steps,
        extraction_timestep: s.config.extract_t,
    };
    let rows = ablate(&s.weights, &s.schedule, &latent, &settings, &seeds)?;
    let mut comments = vec!["nmsa ablate".to_string()];
    comments.extend(s.describe());
    comments.push(format!("prompt={:?}", a.prompt));
    comments.push(format!("style={}", style_id(&a.style)));
    comments.push(format!("seeds={} seed_base={} batch_size={}", a.seeds, a.seed_base, a.seeds));
    comments.push(format!("steps={} extract_t={}", settings.steps, settings.extraction_timestep));
    let out = s.output_path(&a.output);
    write_atomic(&out, metrics_csv(&rows, &comments).as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn sweep_csv(header: &str, comments: &[String], rows: &[SweepRow], with_similarity: bool) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = write!(out, "{}", r.value);
        if with_similarity {
            let _ = write!(out, ",{:.6}", r.similarity.unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, ",{:.6},{:.6},{:.6}", r.style_score, r.content_score, r.runtime_ms);
    }
    out
}

fn probe_timesteps_cmd(s: &Session, a: &crate::ProbeTimestepsArgs) -> Result<()> {
    let latent = s.load_latent(&a.style)?;
    let seeds = seeds_from(0, a.seeds)?;
    let control = AttentionControl::new(a.control.unwrap_or(s.config.control), s.config.lambda)?;
    let settings = AblationSettings {
        prompt: a.prompt.clone(),
        lambda: s.config.lambda,
        steps: s.config.steps,
        extraction_timestep: s.config.extract_t,
    };
    let rows = sweep_extraction_timestep(&s.weights, &s.schedule, &latent, &settings, control, &a.timesteps, &seeds)?;
    let mut comments = vec!["nmsa probe-timesteps".to_string()];
    comments.extend(s.describe());
    comments.push(format!("control={} seeds={} steps={}", control.mode(), a.seeds, settings.steps));
    let out = s.output_path(&a.output);
    let csv = sweep_csv("t,similarity,style_score,content_score,runtime_ms", &comments, &rows, true);
    write_atomic(&out, csv.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn probe_steps_cmd(s: &Session, a: &crate::ProbeStepsArgs) -> Result<()> {
    let latent = s.load_latent(&a.style)?;
    let seeds = seeds_from(0, a.seeds)?;
    if let Some(&bad) = a.step_counts.iter().find(|&&n| n == 0 || n > s.config.timesteps) {
        bail!("step count {bad} outside 1..={}", s.config.timesteps);
    }
    let control = AttentionControl::new(a.control.unwrap_or(s.config.control), s.config.lambda)?;
    let settings = AblationSettings {
        prompt: a.prompt.clone(),
        lambda: s.config.lambda,
        steps: s.config.steps,
        extraction_timestep: s.config.extract_t,
    };
    let rows = sweep_steps(&s.weights, &s.schedule, &latent, &settings, control, &a.step_counts, &seeds)?;
    let mut comments = vec!["nmsa probe-steps".to_string()];
    comments.extend(s.describe());
    comments.push(format!("control={} seeds={} extract_t={}", control.mode(), a.seeds, settings.extraction_timestep));
    let out = s.output_path(&a.output);
    let csv = sweep_csv("steps,style_score,content_score,runtime_ms", &comments, &rows, false);
    write_atomic(&out, csv.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn pca_viz_cmd(s: &Session, a: &crate::PcaVizArgs) -> Result<()> {
    let g = run_generation(
        s,
        RunSpec {
            prompt: &a.prompt,
            style: a.style.as_deref(),
            control: a.control,
            lambda: None,
            steps: a.steps,
            seed: a.seed,
            layers: None,
            per_step: false,
        },
    )?;
    let img = pca_image(&g.final_taps, a.layer, s)?;
    let path = save_image(s, &img, &a.output, a.format, a.scale)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn pca_image(taps: &FeatureTaps, layer: usize, s: &Session) -> Result<RgbImage> {
    let cfg = &s.config.denoiser;
    let grid = pca_feature_image(taps, layer, cfg.grid_h, cfg.grid_w)?;
    Ok(unit_grid_to_image(&grid))
}
