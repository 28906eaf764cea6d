//! DiffRoll: automatic music transcription as conditional diffusion.
//!
//! A binary piano roll is generated from Gaussian noise by a denoiser that
//! predicts the clean roll directly, conditioned on a log-mel spectrogram.
//! The same network serves as an unconditional model when the spectrogram is
//! replaced by the `-1` sentinel, which enables classifier-free guidance at
//! sampling time, unconditional generation, inpainting and pretraining on
//! piano rolls that have no audio.
//!
//! Module map:
//!
//! * [`schedule`]: linear noise schedule and the closed-form forward process.
//! * [`pianoroll`]: roll data model, binarization, note extraction, MIDI I/O.
//! * [`features`]: WAV loading, resampling and the mel conditioner.
//! * [`model`]: the gated residual 1D-conv denoiser with manual backprop.
//! * [`sampler`]: guided reverse diffusion, generation and inpainting.
//! * [`trainer`]: conditioner dropout, L2 loss, Adam and training schemes.
//! * [`evaluation`]: onset-tolerance note matching and note-wise F1.
//! * [`dataset`]: manifests, MAESTRO/MAPS/flat ingestion and toy data.
//! * [`checkpoint`]: self-describing parameter files.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod model;
pub mod pianoroll;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

/// Number of piano keys, A0 (MIDI 21) to C8 (MIDI 108).
pub const NUM_PITCHES: usize = 88;
/// MIDI note number of the lowest roll row.
pub const LOWEST_PITCH: u8 = 21;
/// MIDI note number of the highest roll row.
pub const HIGHEST_PITCH: u8 = 108;
/// Value written into conditioner columns that carry no audio information.
pub const MASK_VALUE: f32 = -1.0;
