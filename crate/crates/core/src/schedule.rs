//! Linear noise schedule and the closed-form forward process.
//!
//! `alpha_t` is interpolated linearly (endpoints included) from
//! [`ALPHA_START`] at `t = 1` to [`ALPHA_END`] at `t = T`. All tables are
//! precomputed in `f64` at construction and the schedule is immutable
//! afterwards.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array, ArrayView, Dimension, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `alpha_1` of the linear schedule.
pub const ALPHA_START: f64 = 0.9999;
/// `alpha_T` of the linear schedule.
pub const ALPHA_END: f64 = 0.98;
/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 200;

/// Reverse-step variance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Stochastic ancestral step with the posterior standard deviation.
    #[default]
    Ddpm,
    /// Deterministic step, `sigma_t = 0`.
    Ddim,
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(SigmaMode::Ddpm),
            "ddim" => Ok(SigmaMode::Ddim),
            other => Err(Error::InvalidArgument(format!(
                "unknown sigma mode {other:?}, expected ddpm or ddim"
            ))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Ddpm => "ddpm",
            SigmaMode::Ddim => "ddim",
        })
    }
}

/// Precomputed `alpha_t`, `alpha_bar_t` and `sigma_t` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    /// `alphas[t]` for `t = 0..=T`; index 0 holds 1.
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T` with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    /// DDPM `sigma_t` for `t = 0..=T`; index 0 holds 0.
    sigmas_ddpm: Vec<f64>,
    mode: SigmaMode,
}

impl NoiseSchedule {
    /// Builds the linear schedule with `steps` diffusion steps in DDPM mode.
    pub fn linear(steps: usize) -> Result<Self> {
        ensure!(
            steps >= 2,
            InvalidArgument,
            "schedule needs at least 2 steps, got {steps}"
        );
        let span = (ALPHA_END - ALPHA_START) / (steps - 1) as f64;
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        alphas.extend((1..=steps).map(|t| ALPHA_START + (t - 1) as f64 * span));
        // Pin the endpoints against interpolation rounding.
        alphas[1] = ALPHA_START;
        alphas[steps] = ALPHA_END;

        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for &a in &alphas[1..] {
            acc *= a;
            alpha_bars.push(acc);
        }

        let mut sigmas_ddpm = vec![0.0; steps + 1];
        for t in 1..=steps {
            let ratio = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
            sigmas_ddpm[t] = ratio.sqrt() * (1.0 - alphas[t]).sqrt();
        }

        Ok(Self {
            steps,
            alphas,
            alpha_bars,
            sigmas_ddpm,
            mode: SigmaMode::Ddpm,
        })
    }

    pub fn with_mode(mut self, mode: SigmaMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mode(&self) -> SigmaMode {
        self.mode
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps).contains(&t),
            InvalidArgument,
            "diffusion step {t} outside 1..={}",
            self.steps
        );
        Ok(())
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t])
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        ensure!(
            t <= self.steps,
            InvalidArgument,
            "diffusion step {t} outside 0..={}",
            self.steps
        );
        Ok(self.alpha_bars[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sigma_t` of the active mode: the DDPM posterior deviation, or 0 for DDIM.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(match self.mode {
            SigmaMode::Ddpm => self.sigmas_ddpm[t],
            SigmaMode::Ddim => 0.0,
        })
    }

    /// Closed-form `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
    ///
    /// Works on a single roll or a whole batch; the noise must have the same
    /// shape as the roll.
    pub fn forward_diffuse<F, D>(
        &self,
        roll: ArrayView<'_, F, D>,
        t: usize,
        noise: ArrayView<'_, F, D>,
    ) -> Result<Array<F, D>>
    where
        F: NdFloat,
        D: Dimension,
    {
        self.check_step(t)?;
        ensure!(
            roll.shape() == noise.shape(),
            Shape,
            "roll {:?} and noise {:?} differ",
            roll.shape(),
            noise.shape()
        );
        let ab = self.alpha_bars[t];
        let signal = F::from(ab.sqrt()).unwrap();
        let spread = F::from((1.0 - ab).sqrt()).unwrap();
        Ok(Zip::from(&roll)
            .and(&noise)
            .map_collect(|&x, &e| signal * x + spread * e))
    }

    /// Plain-text audit table with one `t alpha alpha_bar sigma` row per step.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# t\talpha\talpha_bar\tsigma\n");
        for t in 0..=self.steps {
            let sigma = match self.mode {
                SigmaMode::Ddpm => self.sigmas_ddpm[t],
                SigmaMode::Ddim => 0.0,
            };
            let _ = writeln!(
                out,
                "{t}\t{:.17e}\t{:.17e}\t{:.17e}",
                self.alphas[t], self.alpha_bars[t], sigma
            );
        }
        out
    }
}
