//! WAV ingestion and band-limited resampling to the model rate.

use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Sample rate every audio segment is brought to before feature extraction.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;
/// Length of one training segment (20.48 s at 16 kHz).
pub const SEGMENT_SAMPLES: usize = 327_680;

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes a WAV file to mono `f32` samples, averaging channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSegment> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(AudioSegment {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, segment: &AudioSegment) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: segment.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &segment.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Loads a WAV file as mono audio at [`TARGET_SAMPLE_RATE`].
pub fn load_and_resample(path: impl AsRef<Path>) -> Result<AudioSegment> {
    let seg = read_wav(path)?;
    let samples = resample(&seg.samples, seg.sample_rate, TARGET_SAMPLE_RATE)?;
    Ok(AudioSegment {
        samples,
        sample_rate: TARGET_SAMPLE_RATE,
    })
}

// Kaiser-windowed sinc resampler.
const ZERO_CROSSINGS: f64 = 24.0;
const KAISER_BETA: f64 = 8.6;
const ROLLOFF: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resamples `input` from `from` Hz to `to` Hz.
///
/// Equal rates return the input unchanged. Output length is
/// `ceil(len * to / from)`.
pub fn resample(input: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    ensure!(
        from > 0 && to > 0,
        InvalidArgument,
        "sample rates must be positive ({from} -> {to})"
    );
    if from == to {
        return Ok(input.to_vec());
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = (to as u64 / g, from as u64 / g);
    let out_len = (input.len() as u64 * up).div_ceil(down) as usize;

    // Cutoff relative to the input Nyquist.
    let cutoff = (to as f64 / from as f64).min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS / cutoff;
    let taps = half_width.ceil() as i64;
    let norm = bessel_i0(KAISER_BETA);

    // One filter per output phase; phase p covers offset frac = p * down / up mod 1.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = ((p * down) % up) as f64 / up as f64;
            (-taps + 1..=taps)
                .map(|k| {
                    // Distance between output time and input sample n0 + k.
                    let x = frac - k as f64;
                    if x.abs() >= half_width {
                        return 0.0;
                    }
                    let arg = std::f64::consts::PI * cutoff * x;
                    let sinc = if x == 0.0 { 1.0 } else { arg.sin() / arg };
                    let r = x / half_width;
                    let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                    cutoff * sinc * w
                })
                .collect()
        })
        .collect();

    let n = input.len() as i64;
    let out = (0..out_len)
        .map(|m| {
            let pos = m as u64 * down;
            let n0 = (pos / up) as i64;
            let filter = &phases[(m as u64 % up) as usize];
            let mut acc = 0.0f64;
            for (i, &h) in filter.iter().enumerate() {
                let idx = n0 - taps + 1 + i as i64;
                if (0..n).contains(&idx) {
                    acc += h * input[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Ok(out)
}
