//! Guided reverse diffusion.
//!
//! Each step combines a conditional and an unconditional prediction of the
//! clean roll, `x0 = (1 + w) x0(c) - w x0(-1)`, recovers the implied noise
//! and moves to `x_{t-1}`:
//!
//! ```text
//! eps     = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)
//! x_{t-1} = sqrt(ab_{t-1}) x0 + sqrt(1 - ab_{t-1} - sigma_t^2) eps + sigma_t z
//! ```
//!
//! `w = -1` leaves only the unconditional term (generation); `w = 0` only
//! the conditional one. Inpainting is sampling with a partially masked
//! conditioner.

use ndarray::{concatenate, s, Array, Array2, Array3, ArrayView, ArrayView3, Axis, Dimension, NdFloat, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::features::{MaskSelector, MelConditioner};
use crate::model::Denoiser;
use crate::pianoroll::{binarize, PianoRoll, DEFAULT_THRESHOLD};
use crate::schedule::{NoiseSchedule, SigmaMode, DEFAULT_STEPS};
use crate::{MASK_VALUE, NUM_PITCHES};

/// Frames generated when no conditioner fixes the length.
pub const DEFAULT_GENERATION_FRAMES: usize = 640;

/// Sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Guidance weight.
    pub w: f64,
    pub sigma_mode: SigmaMode,
    /// Number of diffusion steps; must equal the schedule's.
    pub steps: usize,
    pub seed: u64,
    pub threshold: f32,
    /// Record `x_t` every this many steps (and at the end) when set.
    pub snapshot_every: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            w: 0.5,
            sigma_mode: SigmaMode::Ddpm,
            steps: DEFAULT_STEPS,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            snapshot_every: None,
        }
    }
}

impl SamplerConfig {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps != schedule.steps() {
            return Err(Error::ConfigMismatch(format!(
                "sampler asks for {} steps, schedule has {}",
                self.steps,
                schedule.steps()
            )));
        }
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            InvalidArgument,
            "threshold must lie in (0, 1), got {}",
            self.threshold
        );
        ensure!(self.w.is_finite(), InvalidArgument, "guidance weight must be finite");
        ensure!(
            self.snapshot_every != Some(0),
            InvalidArgument,
            "snapshot interval must be positive"
        );
        Ok(())
    }
}

/// `(1 + w) cond - w uncond`, element-wise.
///
/// `w = 0` and `w = -1` return the corresponding input exactly.
pub fn cfg_combine<F, D>(
    cond: ArrayView<'_, F, D>,
    uncond: ArrayView<'_, F, D>,
    w: f64,
) -> Result<Array<F, D>>
where
    F: NdFloat,
    D: Dimension,
{
    ensure!(
        cond.shape() == uncond.shape(),
        Shape,
        "conditional {:?} and unconditional {:?} predictions differ",
        cond.shape(),
        uncond.shape()
    );
    // Skip the arithmetic for the identities so signed zeros survive too.
    if w == 0.0 {
        return Ok(cond.to_owned());
    }
    if w == -1.0 {
        return Ok(uncond.to_owned());
    }
    let a = F::from(1.0 + w).unwrap();
    let b = F::from(w).unwrap();
    Ok(Zip::from(&cond)
        .and(&uncond)
        .map_collect(|&c, &u| a * c - b * u))
}

/// Noise implied by `x_t` and a clean-roll estimate at step `t`.
pub fn epsilon_from_x0<F, D>(
    x_t: ArrayView<'_, F, D>,
    x0_hat: ArrayView<'_, F, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>>
where
    F: NdFloat,
    D: Dimension,
{
    ensure!(
        t >= 1,
        InvalidArgument,
        "noise is undefined at t = 0 (alpha_bar_0 = 1)"
    );
    let ab = schedule.alpha_bar(t)?;
    ensure!(
        x_t.shape() == x0_hat.shape(),
        Shape,
        "x_t {:?} and x0 {:?} differ",
        x_t.shape(),
        x0_hat.shape()
    );
    let signal = F::from(ab.sqrt()).unwrap();
    let inv_spread = F::from(1.0 / (1.0 - ab).sqrt()).unwrap();
    Ok(Zip::from(&x_t)
        .and(&x0_hat)
        .map_collect(|&x, &x0| (x - signal * x0) * inv_spread))
}

/// One reverse step with an explicit `sigma_t`.
pub fn reverse_step_with_sigma<F, D>(
    x_t: ArrayView<'_, F, D>,
    x0_hat: ArrayView<'_, F, D>,
    t: usize,
    noise: ArrayView<'_, F, D>,
    sigma: f64,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>>
where
    F: NdFloat,
    D: Dimension,
{
    ensure!(
        noise.shape() == x_t.shape(),
        Shape,
        "noise {:?} does not match x_t {:?}",
        noise.shape(),
        x_t.shape()
    );
    let eps = epsilon_from_x0(x_t, x0_hat.view(), t, schedule)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let mut var = 1.0 - ab_prev - sigma * sigma;
    if var < 0.0 {
        if var > -1e-12 {
            var = 0.0;
        } else {
            return Err(Error::NumericalDomain(format!(
                "1 - alpha_bar_{} - sigma_{t}^2 = {var} is negative",
                t - 1
            )));
        }
    }
    let a = F::from(ab_prev.sqrt()).unwrap();
    let b = F::from(var.sqrt()).unwrap();
    let c = F::from(sigma).unwrap();
    Ok(Zip::from(&x0_hat)
        .and(&eps)
        .and(&noise)
        .map_collect(|&x0, &e, &z| a * x0 + b * e + c * z))
}

/// One reverse step using the schedule's active sigma mode.
pub fn reverse_step<F, D>(
    x_t: ArrayView<'_, F, D>,
    x0_hat: ArrayView<'_, F, D>,
    t: usize,
    noise: ArrayView<'_, F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>>
where
    F: NdFloat,
    D: Dimension,
{
    let sigma = schedule.sigma(t)?;
    reverse_step_with_sigma(x_t, x0_hat, t, noise, sigma, schedule)
}

/// Source of the Gaussian draws consumed by the reverse loop.
pub trait NoiseSource {
    /// Fills a `(batch, 88, frames)` array.
    fn draw(&mut self, shape: (usize, usize, usize)) -> Array3<f32>;
}

/// Independent ChaCha streams per batch element, keyed by `(seed, run index)`.
///
/// Element `i` of a batch started at `first_run` reads stream `first_run + i`,
/// so a run's output does not depend on what it was batched with.
pub struct StreamNoise {
    rngs: Vec<ChaCha8Rng>,
}

impl StreamNoise {
    pub fn new(seed: u64, first_run: u64, count: usize) -> Self {
        let rngs = (0..count as u64)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(first_run + i);
                rng
            })
            .collect();
        Self { rngs }
    }
}

impl NoiseSource for StreamNoise {
    fn draw(&mut self, shape: (usize, usize, usize)) -> Array3<f32> {
        assert_eq!(shape.0, self.rngs.len(), "batch size changed mid-run");
        let mut out = Array3::zeros(shape);
        for (mut slab, rng) in out.outer_iter_mut().zip(&mut self.rngs) {
            slab.mapv_inplace(|_| StandardNormal.sample(rng));
        }
        out
    }
}

/// Result of one sampling run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final `x_0` before thresholding, `88 x frames`.
    pub raw: Array2<f32>,
    pub roll: PianoRoll,
    /// `(t, x_t)` snapshots when requested.
    pub trajectory: Vec<(usize, Array2<f32>)>,
}

/// Runs the reverse loop over a batch of conditioners `(B, mel_bins, frames)`.
///
/// Returns the final `x_0` batch and any snapshots (`(t, x_t)` with a
/// `(B, 88, frames)` array each).
pub fn reverse_diffusion<M: Denoiser<f32> + ?Sized>(
    model: &M,
    conds: ArrayView3<'_, f32>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<(Array3<f32>, Vec<(usize, Array3<f32>)>)> {
    cfg.validate(schedule)?;
    let schedule = schedule.clone().with_mode(cfg.sigma_mode);
    let (b, _, frames) = conds.dim();
    let shape = (b, NUM_PITCHES, frames);
    let masked = Array3::from_elem(conds.dim(), MASK_VALUE);
    // Conditional and unconditional passes share one doubled batch.
    let both = concatenate![Axis(0), conds, masked.view()];

    let mut x = noise.draw(shape);
    let mut trajectory = Vec::new();
    for t in (1..=schedule.steps()).rev() {
        let z = if t > 1 {
            noise.draw(shape)
        } else {
            Array3::zeros(shape)
        };
        let x0 = if cfg.w == -1.0 {
            model.predict_x0(x.view(), &vec![t; b], masked.view())?
        } else if cfg.w == 0.0 {
            model.predict_x0(x.view(), &vec![t; b], conds)?
        } else {
            let xx = concatenate![Axis(0), x.view(), x.view()];
            let pred = model.predict_x0(xx.view(), &vec![t; 2 * b], both.view())?;
            cfg_combine(
                pred.slice(s![..b, .., ..]),
                pred.slice(s![b.., .., ..]),
                cfg.w,
            )?
        };
        x = reverse_step(x.view(), x0.view(), t, z.view(), &schedule)?;
        if let Some(every) = cfg.snapshot_every {
            let step = t - 1;
            if step % every == 0 {
                trajectory.push((step, x.clone()));
            }
        }
    }
    Ok((x, trajectory))
}

fn finish(
    raw: Array2<f32>,
    trajectory: Vec<(usize, Array2<f32>)>,
    cfg: &SamplerConfig,
    frame_rate: f64,
) -> Result<SampleOutput> {
    let roll = binarize(raw.view(), cfg.threshold, frame_rate)?;
    Ok(SampleOutput {
        raw,
        roll,
        trajectory,
    })
}

/// Samples several conditioners as one batch; run `i` uses noise stream
/// `first_run + i`.
pub fn sample_batch<M: Denoiser<f32> + ?Sized>(
    model: &M,
    conds: &[MelConditioner],
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    frame_rate: f64,
    first_run: u64,
) -> Result<Vec<SampleOutput>> {
    ensure!(!conds.is_empty(), InvalidArgument, "nothing to sample");
    let dim = conds[0].data().dim();
    ensure!(
        conds.iter().all(|c| c.data().dim() == dim),
        Shape,
        "batched conditioners must share a shape"
    );
    let views: Vec<_> = conds.iter().map(|c| c.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let mut noise = StreamNoise::new(cfg.seed, first_run, conds.len());
    let (x0, snaps) = reverse_diffusion(model, stacked.view(), cfg, schedule, &mut noise)?;
    (0..conds.len())
        .map(|i| {
            let trajectory = snaps
                .iter()
                .map(|(t, x)| (*t, x.index_axis(Axis(0), i).to_owned()))
                .collect();
            finish(x0.index_axis(Axis(0), i).to_owned(), trajectory, cfg, frame_rate)
        })
        .collect()
}

/// Transcribes one conditioner.
pub fn sample<M: Denoiser<f32> + ?Sized>(
    model: &M,
    cond: &MelConditioner,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    frame_rate: f64,
) -> Result<SampleOutput> {
    Ok(sample_batch(model, std::slice::from_ref(cond), cfg, schedule, frame_rate, 0)?.remove(0))
}

/// Unconditional generation of `frames` frames (`w = -1`).
pub fn generate<M: Denoiser<f32> + ?Sized>(
    model: &M,
    frames: usize,
    mel_bins: usize,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    frame_rate: f64,
) -> Result<SampleOutput> {
    ensure!(frames > 0, InvalidArgument, "cannot generate zero frames");
    let cfg = SamplerConfig {
        w: -1.0,
        ..cfg.clone()
    };
    let cond = MelConditioner::fully_masked(mel_bins, frames);
    sample(model, &cond, &cfg, schedule, frame_rate)
}

/// Samples with the selected frames of the conditioner masked out.
pub fn inpaint<M: Denoiser<f32> + ?Sized>(
    model: &M,
    cond: &MelConditioner,
    mask: &MaskSelector,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    frame_rate: f64,
) -> Result<SampleOutput> {
    let masked = cond.apply_mask(mask)?;
    sample(model, &masked, cfg, schedule, frame_rate)
}

/// Single-pass transcription for models trained in discriminative mode
/// (`x_t = 0`, `t = 1`).
pub fn transcribe_direct<M: Denoiser<f32> + ?Sized>(
    model: &M,
    cond: &MelConditioner,
    threshold: f32,
    frame_rate: f64,
) -> Result<SampleOutput> {
    let frames = cond.num_frames();
    let x = Array3::zeros((1, NUM_PITCHES, frames));
    let c = cond.view().insert_axis(Axis(0));
    let out = model.predict_x0(x.view(), &[1], c)?;
    let raw = out.index_axis(Axis(0), 0).to_owned();
    let roll = binarize(raw.view(), threshold, frame_rate)?;
    Ok(SampleOutput {
        raw,
        roll,
        trajectory: Vec::new(),
    })
}
