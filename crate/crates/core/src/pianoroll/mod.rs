//! Piano-roll data model, binarization and note-object extraction.
//!
//! Row `i` of a roll is MIDI note `21 + i`; this mapping is shared by MIDI
//! import/export and by evaluation.

mod midi;

pub use midi::{midi_to_roll, notes_to_midi, notes_to_midi_bytes, read_midi_notes, MidiNotes};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::{HIGHEST_PITCH, LOWEST_PITCH, NUM_PITCHES};

/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

// Tolerance for frame-boundary rounding when converting seconds to frames.
const FRAME_EPS: f64 = 1e-6;

/// An 88 x frames matrix with a frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    data: Array2<f32>,
    frame_rate: f64,
}

impl PianoRoll {
    pub fn new(data: Array2<f32>, frame_rate: f64) -> Result<Self> {
        ensure!(
            data.nrows() == NUM_PITCHES,
            Shape,
            "piano roll needs {NUM_PITCHES} rows, got {}",
            data.nrows()
        );
        ensure!(
            frame_rate.is_finite() && frame_rate > 0.0,
            InvalidArgument,
            "frame rate must be positive, got {frame_rate}"
        );
        Ok(Self { data, frame_rate })
    }

    pub fn zeros(num_frames: usize, frame_rate: f64) -> Result<Self> {
        Self::new(Array2::zeros((NUM_PITCHES, num_frames)), frame_rate)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    /// True when every entry is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of active cells.
    pub fn active_cells(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// A note object: MIDI pitch, onset and offset in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: f64,
    pub offset: f64,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, offset: f64) -> Result<Self> {
        ensure!(
            (LOWEST_PITCH..=HIGHEST_PITCH).contains(&pitch),
            InvalidArgument,
            "pitch {pitch} outside {LOWEST_PITCH}..={HIGHEST_PITCH}"
        );
        ensure!(
            onset.is_finite() && offset.is_finite() && offset > onset && onset >= 0.0,
            InvalidArgument,
            "note times must satisfy 0 <= onset < offset, got {onset}..{offset}"
        );
        Ok(Self {
            pitch,
            onset,
            offset,
        })
    }
}

/// Thresholds raw model output: `1` where `raw > threshold`, else `0`.
pub fn binarize(raw: ArrayView2<'_, f32>, threshold: f32, frame_rate: f64) -> Result<PianoRoll> {
    PianoRoll::new(
        raw.mapv(|v| if v > threshold { 1.0 } else { 0.0 }),
        frame_rate,
    )
}

/// Extracts one note per maximal run of active frames in each row.
///
/// Output is sorted by onset, then pitch.
pub fn roll_to_notes(roll: &PianoRoll) -> Result<Vec<NoteEvent>> {
    ensure!(
        roll.is_binary(),
        InvalidArgument,
        "note extraction needs a binary roll"
    );
    let fr = roll.frame_rate;
    let mut notes = Vec::new();
    for (row, values) in roll.data.outer_iter().enumerate() {
        let pitch = LOWEST_PITCH + row as u8;
        let mut start = None;
        for (j, &v) in values.iter().enumerate() {
            match (v == 1.0, start) {
                (true, None) => start = Some(j),
                (false, Some(a)) => {
                    notes.push(NoteEvent {
                        pitch,
                        onset: a as f64 / fr,
                        offset: j as f64 / fr,
                    });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            notes.push(NoteEvent {
                pitch,
                onset: a as f64 / fr,
                offset: values.len() as f64 / fr,
            });
        }
    }
    sort_notes(&mut notes);
    Ok(notes)
}

/// Sorts by (onset, pitch, offset).
pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset.total_cmp(&b.offset))
    });
}

/// Frame index of a time, `floor(seconds * frame_rate)`.
pub fn time_to_frame(seconds: f64, frame_rate: f64) -> usize {
    (seconds * frame_rate + FRAME_EPS).floor().max(0.0) as usize
}

/// Rasterizes notes into frames `[floor(on * fr), floor(off * fr))`.
///
/// Notes outside the piano range are skipped and counted in the return value.
pub fn notes_to_roll(
    notes: &[NoteEvent],
    frame_rate: f64,
    num_frames: usize,
) -> Result<(PianoRoll, usize)> {
    let mut roll = PianoRoll::zeros(num_frames, frame_rate)?;
    let mut dropped = 0;
    for note in notes {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&note.pitch) {
            dropped += 1;
            continue;
        }
        let row = (note.pitch - LOWEST_PITCH) as usize;
        let a = time_to_frame(note.onset, frame_rate).min(num_frames);
        let b = time_to_frame(note.offset, frame_rate).min(num_frames);
        for j in a..b {
            roll.data[[row, j]] = 1.0;
        }
    }
    Ok((roll, dropped))
}
