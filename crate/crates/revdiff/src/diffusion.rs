//! DDPM mathematics shared by both converters.
//!
//! Schedule construction, forward noising, single-step x̂₀ recovery, the
//! posterior denoising step, the full reverse sampling loop, and the
//! simplified noise-prediction loss. Everything here is pure f64 math over
//! mel-shaped grids; the trainable networks plug in through [`NoisePredictor`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;

use crate::error::{Result, RevdiffError};
use crate::spectral::{MelSpec, N_FRAMES, N_MELS};

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 250;
/// Linear schedule endpoints at the 1000-step reference; endpoints are scaled
/// by `1000 / T` so shorter schedules keep a comparable terminal ᾱ.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
const REF_STEPS: f64 = 1000.0;
/// Upper clamp keeping scaled betas valid for very short schedules.
const BETA_MAX: f64 = 0.999;

/// Grid alias: same 128×128 shape as a mel spectrogram, unbounded values.
pub type Grid = Array2<f64>;

/// A noisy latent tagged with its step index.
#[derive(Debug, Clone)]
pub struct LatentSpec {
    pub grid: Grid,
    pub t: usize,
}

impl LatentSpec {
    pub fn new(grid: Grid, t: usize) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(RevdiffError::NonFinite { context: "latent grid".into() });
        }
        Ok(Self { grid, t })
    }
}

/// Variance schedule with cached products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linearly interpolated beta schedule over `t_steps`.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(RevdiffError::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(RevdiffError::InvalidArgument(format!(
            "invalid beta bounds ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { t_steps, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// Default linear schedule with endpoints scaled by `1000 / T`.
    pub fn linear(t_steps: usize) -> Result<Self> {
        let scale = REF_STEPS / t_steps as f64;
        make_schedule(
            t_steps,
            (BETA_START * scale).min(BETA_MAX),
            (BETA_END * scale).min(BETA_MAX),
        )
    }

    /// ᾱ_t with the convention ᾱ_0 = 1. `t` is 1-based.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps {
            return Err(RevdiffError::InvalidArgument(format!(
                "step t={t} outside [1, {}]",
                self.t_steps
            )));
        }
        Ok(())
    }

    /// Posterior standard deviation σ_t = √β̃_t; β̃_1 = 0.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let ab_t = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_at(t - 1);
        (((1.0 - ab_prev) / (1.0 - ab_t)) * self.beta[t - 1]).sqrt()
    }
}

/// Standard-normal grid of the given shape.
pub fn gaussian_grid(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Grid {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Forward noising: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·z. `t` is 1-based.
pub fn q_sample(x0: &Grid, t: usize, z: &Grid, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    if x0.dim() != z.dim() {
        return Err(RevdiffError::ShapeMismatch {
            expected: format!("{:?}", x0.dim()),
            got: format!("{:?}", z.dim()),
        });
    }
    let ab = s.alpha_bar_at(t);
    Ok(x0 * ab.sqrt() + z * (1.0 - ab).sqrt())
}

/// Single-step clean-sample recovery: x̂₀ = (x_t − √(1−ᾱ_t)·ẑ)/√ᾱ_t.
/// Unclamped; callers clamp at the final sampling step and in cycle reuse.
pub fn predict_x0(x_t: &Grid, z_hat: &Grid, t: usize, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    if x_t.dim() != z_hat.dim() {
        return Err(RevdiffError::ShapeMismatch {
            expected: format!("{:?}", x_t.dim()),
            got: format!("{:?}", z_hat.dim()),
        });
    }
    let ab = s.alpha_bar_at(t);
    Ok((x_t - &(z_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// Hard clamp to the mel normalization range.
pub fn clamp_unit(g: &Grid) -> Grid {
    g.mapv(|v| v.clamp(-1.0, 1.0))
}

/// DDPM posterior step from t to t−1 with σ_t²=β̃_t; `noise_draw` must be zero
/// at t = 1.
pub fn denoise_step(
    x_t: &Grid,
    z_hat: &Grid,
    t: usize,
    s: &NoiseSchedule,
    noise_draw: &Grid,
) -> Result<Grid> {
    s.check_t(t)?;
    let a_t = s.alpha[t - 1];
    let b_t = s.beta[t - 1];
    let ab_t = s.alpha_bar_at(t);
    let mean = (x_t - &(z_hat * (b_t / (1.0 - ab_t).sqrt()))) / a_t.sqrt();
    Ok(mean + noise_draw * s.posterior_sigma(t))
}

/// Noise-prediction interface both converter networks implement.
pub trait NoisePredictor {
    /// Predicted noise ẑ for latent `x_t` at step `t` (1-based), conditioned
    /// on the source spectrogram (second input channel) and a scene embedding.
    fn predict_noise(&self, x_t: &Grid, source: &Grid, t: usize, scene: &[f64]) -> Result<Grid>;
}

/// Full reverse sampling loop. Deterministic given `seed`. The final step
/// returns the clamped x̂₀ prediction.
pub fn sample(
    model: &dyn NoisePredictor,
    scene: &[f64],
    source: &MelSpec,
    s: &NoiseSchedule,
    seed: u64,
    steps_override: Option<usize>,
) -> Result<MelSpec> {
    let sched;
    let s = match steps_override {
        Some(n) if n != s.t_steps => {
            sched = NoiseSchedule::linear(n)?;
            &sched
        }
        _ => s,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_t = gaussian_grid(N_MELS, N_FRAMES, &mut rng);
    for t in (1..=s.t_steps).rev() {
        let z_hat = model.predict_noise(&x_t, &source.grid, t, scene)?;
        if t == 1 {
            x_t = clamp_unit(&predict_x0(&x_t, &z_hat, t, s)?);
        } else {
            let noise = gaussian_grid(N_MELS, N_FRAMES, &mut rng);
            x_t = denoise_step(&x_t, &z_hat, t, s, &noise)?;
        }
    }
    MelSpec::new(x_t, source.sample_rate)
}

/// Quantities cached by [`diffusion_loss`] for reuse by style and cycle terms.
#[derive(Debug, Clone)]
pub struct DiffusionCache {
    pub t: usize,
    pub z: Grid,
    pub z_hat: Grid,
    pub x0_hat: Grid,
}

/// Simplified DDPM objective: MSE between true and predicted noise at a
/// uniformly sampled step.
pub fn diffusion_loss(
    model: &dyn NoisePredictor,
    x0_target: &MelSpec,
    source: &MelSpec,
    scene: &[f64],
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, DiffusionCache)> {
    let t = rng.random_range(1..=s.t_steps);
    let z = gaussian_grid(N_MELS, N_FRAMES, rng);
    let x_t = q_sample(&x0_target.grid, t, &z, s)?;
    let z_hat = model.predict_noise(&x_t, &source.grid, t, scene)?;
    let x0_hat = predict_x0(&x_t, &z_hat, t, s)?;
    let n = z.len() as f64;
    let loss = z
        .iter()
        .zip(z_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok((loss, DiffusionCache { t, z, z_hat, x0_hat }))
}
