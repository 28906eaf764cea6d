//! Log-mel spectrogram conditioner.
//!
//! Magnitude STFT (periodic Hann window, centered frames with reflection
//! padding) projected on a Slaney-style mel filterbank, compressed with
//! `ln(m + floor)` and mapped to `[0, 1]` by a fixed affine transform. The
//! transform's range is derived from the largest value a full-scale signal
//! can produce, so it does not depend on the data.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::audio::{AudioSegment, TARGET_SAMPLE_RATE};
use crate::error::{ensure, Error, Result};
use crate::MASK_VALUE;

/// Feature extraction constants; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_SAMPLE_RATE,
            n_fft: 2048,
            hop_length: 512,
            n_mels: 229,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    /// Roll and conditioner frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    /// Frames produced for `samples` input samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        samples / self.hop_length
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.n_fft >= 4 && self.n_fft.is_multiple_of(2),
            InvalidArgument,
            "n_fft must be even and >= 4, got {}",
            self.n_fft
        );
        ensure!(self.hop_length > 0, InvalidArgument, "hop length must be positive");
        ensure!(self.n_mels > 0, InvalidArgument, "need at least one mel bin");
        ensure!(
            self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0,
            InvalidArgument,
            "mel range {}..{} Hz invalid for {} Hz audio",
            self.f_min,
            self.f_max,
            self.sample_rate
        );
        ensure!(self.log_floor > 0.0, InvalidArgument, "log floor must be positive");
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Area-normalized triangular filters, `n_mels x (n_fft / 2 + 1)`.
fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let fft_freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * nyquist / (bins - 1) as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (right - left);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let w = rise.min(fall).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Spectrogram conditioner, `n_mels x frames`.
///
/// Unmasked entries lie in `[0, 1]`; masked columns are exactly `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConditioner {
    data: Array2<f32>,
}

impl MelConditioner {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        for col in data.axis_iter(Axis(1)) {
            let masked = col.iter().all(|&v| v == MASK_VALUE);
            ensure!(
                masked || col.iter().all(|&v| (0.0..=1.0).contains(&v)),
                InvalidArgument,
                "conditioner columns must be in [0, 1] or entirely {MASK_VALUE}"
            );
        }
        Ok(Self { data })
    }

    /// A conditioner with every entry set to the mask value.
    pub fn fully_masked(n_mels: usize, num_frames: usize) -> Self {
        Self {
            data: Array2::from_elem((n_mels, num_frames), MASK_VALUE),
        }
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_fully_masked(&self) -> bool {
        self.data.iter().all(|&v| v == MASK_VALUE)
    }

    /// Sets the selected frames' columns to the mask value.
    pub fn apply_mask(&self, selector: &MaskSelector) -> Result<Self> {
        let mut data = self.data.clone();
        match selector {
            MaskSelector::Full => data.fill(MASK_VALUE),
            MaskSelector::Frames(frames) => {
                ensure!(
                    frames.len() == data.ncols(),
                    Shape,
                    "mask has {} frames, conditioner has {}",
                    frames.len(),
                    data.ncols()
                );
                for (mut col, &masked) in data.axis_iter_mut(Axis(1)).zip(frames) {
                    if masked {
                        col.fill(MASK_VALUE);
                    }
                }
            }
        }
        Ok(Self { data })
    }
}

/// Which conditioner frames to mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSelector {
    /// Mask everything.
    Full,
    /// One flag per frame.
    Frames(Vec<bool>),
}

impl MaskSelector {
    /// Masks frames `start..end` out of `num_frames`; `end` is clamped.
    pub fn frame_range(num_frames: usize, start: usize, end: usize) -> Self {
        let end = end.min(num_frames);
        MaskSelector::Frames((0..num_frames).map(|j| j >= start && j < end).collect())
    }

    /// Masks frames overlapping `[start_s, end_s)` seconds.
    pub fn time_range(num_frames: usize, frame_rate: f64, start_s: f64, end_s: f64) -> Self {
        if end_s <= start_s {
            return MaskSelector::Frames(vec![false; num_frames]);
        }
        let start = (start_s * frame_rate + 1e-9).floor().max(0.0) as usize;
        let end = (end_s * frame_rate - 1e-9).ceil().max(0.0) as usize;
        Self::frame_range(num_frames, start, end)
    }
}

/// Configured mel extractor. Immutable and shareable across threads.
pub struct MelExtractor {
    config: FeatureConfig,
    filterbank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    log_min: f64,
    log_max: f64,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("config", &self.config)
            .field("log_min", &self.log_min)
            .field("log_max", &self.log_max)
            .finish()
    }
}

impl MelExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(&config);
        let n = config.n_fft;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        // |X_k| <= sum(window) for |x| <= 1, so each mel band is bounded by
        // its filter mass times that.
        let window_sum: f64 = window.iter().sum();
        let max_mass = filterbank
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .fold(0.0f64, f64::max);
        let log_min = config.log_floor.ln();
        let log_max = (max_mass * window_sum + config.log_floor).ln();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            config,
            filterbank,
            window,
            fft,
            log_min,
            log_max,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// The `(ln floor, ln upper bound)` pair mapped to `0` and `1`.
    pub fn log_range(&self) -> (f64, f64) {
        (self.log_min, self.log_max)
    }

    /// Computes the normalized log-mel conditioner of a 16 kHz segment.
    pub fn conditioner(&self, segment: &AudioSegment) -> Result<MelConditioner> {
        let cfg = &self.config;
        if segment.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "audio at {} Hz, features expect {} Hz",
                segment.sample_rate, cfg.sample_rate
            )));
        }
        let x = &segment.samples;
        ensure!(
            x.len() >= cfg.n_fft,
            InvalidArgument,
            "segment of {} samples is shorter than one {}-sample window",
            x.len(),
            cfg.n_fft
        );
        let frames = cfg.num_frames(x.len());
        let pad = cfg.n_fft / 2;
        let len = x.len() as i64;
        // Reflection without edge repeat: index -1 maps to 1.
        let reflect = |i: i64| -> f64 {
            let mut j = i;
            if j < 0 {
                j = -j;
            }
            if j >= len {
                j = 2 * (len - 1) - j;
            }
            x[j as usize] as f64
        };

        let bins = cfg.n_fft / 2 + 1;
        let mut magnitude = Array2::<f64>::zeros((bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for j in 0..frames {
            let start = (j * cfg.hop_length) as i64 - pad as i64;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(reflect(start + i as i64) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                magnitude[[k, j]] = buf[k].norm();
            }
        }
        let mel = self.filterbank.dot(&magnitude);
        let span = self.log_max - self.log_min;
        let floor = cfg.log_floor;
        let lo = self.log_min;
        let data = mel.mapv(|m| (((m + floor).ln() - lo) / span).clamp(0.0, 1.0) as f32);
        Ok(MelConditioner { data })
    }
}
