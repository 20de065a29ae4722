//! Linear-β noise schedule, forward noising, the consistency function and
//! the multistep consistency sampler.

use crate::error::{shape_err, Error, Result};
use crate::latent::LatentGrid;
use crate::numerics::{gaussian, stream, Rng, Tensor};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const SIGMA_DATA: f64 = 0.5;

/// Cumulative noise levels `ᾱ_t` for `t = 0..=T` plus the scales used by
/// the consistency boundary coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    alpha_bar: Vec<f64>,
    sigma_data: f64,
    t_scale: f64,
}

impl NoiseSchedule {
    /// Linear β from 1e-4 to 0.02 over `timesteps` steps.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(out_of_range("T", timesteps, ">= 1"));
        }
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for s in 1..=timesteps {
            let frac = if timesteps == 1 {
                0.0
            } else {
                (s - 1) as f64 / (timesteps - 1) as f64
            };
            let beta = BETA_START + (BETA_END - BETA_START) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self {
            timesteps,
            alpha_bar,
            sigma_data: SIGMA_DATA,
            t_scale: timesteps as f64 / 10.0,
        })
    }

    /// Schedule with explicit `ᾱ_0..=ᾱ_T`. `ᾱ_0` must be 1 and the sequence
    /// strictly decreasing within `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let valid = alpha_bar.len() >= 2
            && alpha_bar[0] == 1.0
            && alpha_bar.windows(2).all(|w| w[1] < w[0])
            && alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0);
        if !valid {
            return Err(Error::OutOfRange {
                what: "alpha_bar",
                value: format!("{alpha_bar:?}"),
                range: "1 = a0 > a1 > ... > 0".into(),
            });
        }
        let timesteps = alpha_bar.len() - 1;
        Ok(Self {
            timesteps,
            alpha_bar,
            sigma_data: SIGMA_DATA,
            t_scale: timesteps as f64 / 10.0,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn t_scale(&self) -> f64 {
        self.t_scale
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| out_of_range("t", t, &format!("0..={}", self.timesteps)))
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.alpha_bar(t).map(|_| ())
    }

    /// `(c_skip, c_out)` at `t`, with `t̂ = t / t_scale`:
    /// `c_skip = σ²/(t̂²+σ²)`, `c_out = t̂/√(t̂²+σ²)`.
    pub fn boundary_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        let th = t as f64 / self.t_scale;
        let s2 = self.sigma_data * self.sigma_data;
        let denom = th * th + s2;
        Ok((s2 / denom, th / denom.sqrt()))
    }

    /// `n` sampling timesteps, `round((T−1)(n−i+1)/n)` for `i = 1..=n`.
    ///
    /// When `n` is so large that rounding would collide or reach 0, entries
    /// are lifted from the back so the sequence stays strictly decreasing and
    /// ends above 0. This only affects `n` close to `T`.
    pub fn lcm_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.timesteps;
        if n == 0 || n > big_t {
            return Err(out_of_range("steps", n, &format!("1..={big_t}")));
        }
        let top = (big_t - 1) as f64;
        let mut ts: Vec<usize> = (1..=n)
            .map(|i| (top * (n - i + 1) as f64 / n as f64).round() as usize)
            .collect();
        let mut floor = 1;
        for t in ts.iter_mut().rev() {
            *t = (*t).max(floor);
            floor = *t + 1;
        }
        Ok(ts)
    }
}

fn out_of_range(what: &'static str, value: usize, range: &str) -> Error {
    Error::OutOfRange {
        what,
        value: value.to_string(),
        range: range.to_string(),
    }
}

/// Forward diffusion `√ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(
    schedule: &NoiseSchedule,
    z: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    if !z.same_shape(eps) {
        return Err(shape_err(
            "add_noise",
            format!("latent {:?} vs noise {:?}", z.dims(), eps.dims()),
        ));
    }
    if ab == 1.0 {
        return Ok(z.clone());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32)
        .collect();
    let (h, w, c) = z.dims();
    LatentGrid::new(h, w, c, data)
}

/// The network `F_θ(z_t, t)` inside the consistency function. Conditioning
/// and attention control are carried by the implementor.
pub trait Denoise {
    fn denoise(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid>;
}

impl<F> Denoise for F
where
    F: Fn(&LatentGrid, usize) -> Result<LatentGrid>,
{
    fn denoise(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self(z, t)
    }
}

/// `f_θ(z, t) = c_skip(t)·z + c_out(t)·F_θ(z, t)`. At `t = 0` the input is
/// returned untouched.
pub fn consistency_apply<D: Denoise + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    z: &LatentGrid,
    t: usize,
) -> Result<LatentGrid> {
    let (c_skip, c_out) = schedule.boundary_coeffs(t)?;
    if c_out == 0.0 && c_skip == 1.0 {
        return Ok(z.clone());
    }
    let f = denoiser.denoise(z, t)?;
    if !f.same_shape(z) {
        return Err(shape_err(
            "consistency_apply",
            format!("denoiser returned {:?} for input {:?}", f.dims(), z.dims()),
        ));
    }
    let data = z
        .data()
        .iter()
        .zip(f.data())
        .map(|(&x, &y)| (c_skip * f64::from(x) + c_out * f64::from(y)) as f32)
        .collect();
    let (h, w, c) = z.dims();
    LatentGrid::new(h, w, c, data)
}

/// One sampler step: the timestep and the clean-latent estimate it produced.
#[derive(Clone, Debug)]
pub struct SampleStep {
    pub timestep: usize,
    pub estimate: LatentGrid,
}

fn noise_like(rng: &mut Rng, (h, w, c): (usize, usize, usize)) -> LatentGrid {
    let t: Tensor = gaussian(rng, &[h, w, c]);
    LatentGrid::from_tensor(t).expect("shape is [h, w, c]")
}

/// Multistep consistency sampling; returns every step's estimate.
///
/// `z` starts as a standard normal draw from the sampler stream of `seed`.
/// After each non-final step the estimate is re-noised to the next timestep
/// with a fresh draw from the same stream.
pub fn lcm_trajectory<D: Denoise + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    dims: (usize, usize, usize),
    seed: u64,
    n_steps: usize,
) -> Result<Vec<SampleStep>> {
    let ts = schedule.lcm_timesteps(n_steps)?;
    let mut rng = Rng::derive(seed, stream::SAMPLER);
    let mut z = noise_like(&mut rng, dims);
    let mut steps = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let estimate = consistency_apply(denoiser, schedule, &z, t)?;
        if let Some(&next) = ts.get(i + 1) {
            let eps = noise_like(&mut rng, dims);
            z = add_noise(schedule, &estimate, next, &eps)?;
        }
        steps.push(SampleStep {
            timestep: t,
            estimate,
        });
    }
    Ok(steps)
}

/// Final clean-latent estimate of [`lcm_trajectory`].
pub fn lcm_sample<D: Denoise + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    dims: (usize, usize, usize),
    seed: u64,
    n_steps: usize,
) -> Result<LatentGrid> {
    let mut steps = lcm_trajectory(denoiser, schedule, dims, seed, n_steps)?;
    Ok(steps.pop().expect("at least one step").estimate)
}
