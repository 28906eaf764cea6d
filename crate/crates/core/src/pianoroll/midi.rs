//! Standard MIDI file import and export.

use std::collections::HashMap;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use super::{notes_to_roll, sort_notes, NoteEvent, PianoRoll};
use crate::error::{Error, Result};
use crate::{HIGHEST_PITCH, LOWEST_PITCH};

/// Export velocity; the roll carries no dynamics.
pub const EXPORT_VELOCITY: u8 = 64;
/// Ticks per quarter note on export.
const EXPORT_PPQ: u16 = 1000;
/// 120 bpm, giving 2000 ticks per second.
const EXPORT_TEMPO_US: u32 = 500_000;
const EXPORT_TICKS_PER_SECOND: f64 = 2000.0;

/// Notes read from a MIDI file plus how many fell outside the piano range.
#[derive(Debug, Clone, Default)]
pub struct MidiNotes {
    pub notes: Vec<NoteEvent>,
    pub dropped_out_of_range: usize,
}

/// Encodes notes as a single-track (format 0) standard MIDI file.
pub fn notes_to_midi_bytes(notes: &[NoteEvent]) -> Result<Vec<u8>> {
    // (tick, is_on, pitch); offs sort before ons at equal ticks so that
    // back-to-back notes on one key stay separate.
    let mut events: Vec<(u64, bool, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        NoteEvent::new(n.pitch, n.onset, n.offset)?;
        let on = (n.onset * EXPORT_TICKS_PER_SECOND).round() as u64;
        let off = ((n.offset * EXPORT_TICKS_PER_SECOND).round() as u64).max(on + 1);
        events.push((on, true, n.pitch));
        events.push((off, false, n.pitch));
    }
    events.sort_by_key(|&(tick, is_on, pitch)| (tick, is_on, pitch));

    let mut track = Vec::with_capacity(events.len() + 2);
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(EXPORT_TEMPO_US))),
    });
    let mut last = 0u64;
    for (tick, is_on, pitch) in events {
        let delta = u32::try_from(tick - last)
            .ok()
            .filter(|&d| d <= u28::max_value().as_int())
            .ok_or_else(|| Error::Midi("note time exceeds MIDI delta range".into()))?;
        last = tick;
        let key = u7::new(pitch);
        let message = if is_on {
            MidiMessage::NoteOn {
                key,
                vel: u7::new(EXPORT_VELOCITY),
            }
        } else {
            MidiMessage::NoteOff {
                key,
                vel: u7::new(0),
            }
        };
        track.push(TrackEvent {
            delta: u28::new(delta),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message,
            },
        });
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });

    let mut smf = Smf::new(Header::new(
        Format::SingleTrack,
        Timing::Metrical(u15::new(EXPORT_PPQ)),
    ));
    smf.tracks.push(track);
    let mut bytes = Vec::new();
    smf.write_std(&mut bytes)
        .map_err(|e| Error::Midi(format!("encoding failed: {e}")))?;
    Ok(bytes)
}

/// Writes notes to `path` as a standard MIDI file with fixed velocity.
pub fn notes_to_midi(notes: &[NoteEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = notes_to_midi_bytes(notes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses MIDI bytes into note events, merging all tracks and channels.
pub fn parse_midi_notes(bytes: &[u8]) -> Result<MidiNotes> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Midi(format!("parse failed: {e}")))?;

    // (abs tick, order, kind) across tracks; order keeps the merge stable.
    enum Ev {
        Tempo(u32),
        On(u8, u8),
        Off(u8, u8),
    }
    let mut events: Vec<(u64, usize, Ev)> = Vec::new();
    let mut order = 0usize;
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += u64::from(ev.delta.as_int());
            let item = match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => Some(Ev::Tempo(t.as_int())),
                TrackEventKind::Midi { channel, message } => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        Some(Ev::On(channel.as_int(), key.as_int()))
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        Some(Ev::Off(channel.as_int(), key.as_int()))
                    }
                    _ => None,
                },
                _ => None,
            };
            if let Some(item) = item {
                events.push((tick, order, item));
                order += 1;
            }
        }
    }
    // Tempo first at equal ticks, then offs, then ons.
    events.sort_by_key(|(tick, order, ev)| {
        let rank = match ev {
            Ev::Tempo(_) => 0,
            Ev::Off(..) => 1,
            Ev::On(..) => 2,
        };
        (*tick, rank, *order)
    });

    let seconds_per_tick_at = |tempo_us: u32| -> f64 {
        match smf.header.timing {
            Timing::Metrical(ppq) => tempo_us as f64 * 1e-6 / ppq.as_int().max(1) as f64,
            Timing::Timecode(fps, sub) => 1.0 / (fps.as_f32() as f64 * sub.max(1) as f64),
        }
    };

    let mut tempo = 500_000u32;
    let mut last_tick = 0u64;
    let mut now = 0.0f64;
    let mut open: HashMap<(u8, u8), f64> = HashMap::new();
    let mut out = MidiNotes::default();
    let close = |pitch: u8, onset: f64, offset: f64, out: &mut MidiNotes| {
        if offset <= onset {
            return;
        }
        if (LOWEST_PITCH..=HIGHEST_PITCH).contains(&pitch) {
            out.notes.push(NoteEvent {
                pitch,
                onset,
                offset,
            });
        } else {
            out.dropped_out_of_range += 1;
        }
    };
    for (tick, _, ev) in events {
        now += (tick - last_tick) as f64 * seconds_per_tick_at(tempo);
        last_tick = tick;
        match ev {
            Ev::Tempo(t) => tempo = t,
            Ev::On(ch, key) => {
                if let Some(onset) = open.insert((ch, key), now) {
                    close(key, onset, now, &mut out);
                }
            }
            Ev::Off(ch, key) => {
                if let Some(onset) = open.remove(&(ch, key)) {
                    close(key, onset, now, &mut out);
                }
            }
        }
    }
    // Hanging notes end at the last event.
    let mut hanging: Vec<_> = open.into_iter().collect();
    hanging.sort_by_key(|((ch, key), _)| (*ch, *key));
    for ((_, key), onset) in hanging {
        close(key, onset, now, &mut out);
    }
    if log::log_enabled!(log::Level::Warn) && out.dropped_out_of_range > 0 {
        log::warn!(
            "dropped {} notes outside MIDI {LOWEST_PITCH}..={HIGHEST_PITCH}",
            out.dropped_out_of_range
        );
    }
    sort_notes(&mut out.notes);
    Ok(out)
}

/// Reads note events from a MIDI file.
pub fn read_midi_notes(path: impl AsRef<Path>) -> Result<MidiNotes> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_midi_notes(&bytes)
}

/// Loads a MIDI file into a roll of `num_frames` frames.
///
/// Returns the roll and the number of notes dropped for being outside the
/// piano range.
pub fn midi_to_roll(
    path: impl AsRef<Path>,
    frame_rate: f64,
    num_frames: usize,
) -> Result<(PianoRoll, usize)> {
    let midi = read_midi_notes(path)?;
    let (roll, _) = notes_to_roll(&midi.notes, frame_rate, num_frames)?;
    Ok((roll, midi.dropped_out_of_range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::roll_to_notes;
    use ndarray::Array2;

    /// Minimal SMF reader used as an oracle independent of `midly`.
    /// Returns (absolute tick, status byte, key, velocity) channel events and
    /// the header's division.
    fn decode_smf(bytes: &[u8]) -> (u16, Vec<(u64, u8, u8, u8)>) {
        assert_eq!(&bytes[0..4], b"MThd");
        let division = u16::from_be_bytes([bytes[12], bytes[13]]);
        let mut pos = 14;
        let mut out = Vec::new();
        while pos < bytes.len() {
            assert_eq!(&bytes[pos..pos + 4], b"MTrk");
            let len = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
            let end = pos + 8 + len;
            let mut p = pos + 8;
            let mut tick = 0u64;
            let mut running = 0u8;
            while p < end {
                let mut delta = 0u64;
                loop {
                    let b = bytes[p];
                    p += 1;
                    delta = (delta << 7) | u64::from(b & 0x7f);
                    if b & 0x80 == 0 {
                        break;
                    }
                }
                tick += delta;
                let mut status = bytes[p];
                if status & 0x80 != 0 {
                    p += 1;
                    running = status;
                } else {
                    status = running;
                }
                if status == 0xff {
                    let len = bytes[p + 1] as usize;
                    p += 2 + len;
                } else {
                    out.push((tick, status, bytes[p], bytes[p + 1]));
                    p += 2;
                }
            }
            pos = end;
        }
        (division, out)
    }

    #[test]
    fn empty_sequence_encodes() {
        let bytes = notes_to_midi_bytes(&[]).unwrap();
        let (_, events) = decode_smf(&bytes);
        assert!(events.is_empty());
        assert!(parse_midi_notes(&bytes).unwrap().notes.is_empty());
    }

    #[test]
    fn one_second_note_decodes_independently() {
        let note = NoteEvent::new(60, 0.0, 1.0).unwrap();
        let bytes = notes_to_midi_bytes(&[note]).unwrap();
        let (division, events) = decode_smf(&bytes);
        assert_eq!(division, 1000);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0], (0, 0x90, 60, 64));
        // 120 bpm at 1000 ppq: 2000 ticks per second.
        assert_eq!(events[1].0, 2000);
        assert_eq!(events[1].1 & 0xf0, 0x80);
        assert_eq!(events[1].2, 60);
    }

    #[test]
    fn notes_round_trip_within_a_frame() {
        let notes = vec![
            NoteEvent::new(60, 0.1, 0.4).unwrap(),
            NoteEvent::new(64, 0.1, 0.9).unwrap(),
            NoteEvent::new(60, 0.4, 0.7).unwrap(),
        ];
        let back = parse_midi_notes(&notes_to_midi_bytes(&notes).unwrap()).unwrap();
        assert_eq!(back.notes.len(), 3);
        let mut expected = notes.clone();
        sort_notes(&mut expected);
        for (a, b) in back.notes.iter().zip(&expected) {
            assert_eq!(a.pitch, b.pitch);
            assert!((a.onset - b.onset).abs() < 1.0 / 31.25);
            assert!((a.offset - b.offset).abs() < 1.0 / 31.25);
        }
    }

    #[test]
    fn velocity_zero_note_on_ends_note() {
        // Format 0, division 480, one track: on at 0, on vel 0 at 480.
        let mut bytes = b"MThd\0\0\0\x06\0\0\0\x01\x01\xe0MTrk".to_vec();
        let body = [0x00, 0x90, 60, 100, 0x83, 0x60, 0x90, 60, 0, 0x00, 0xff, 0x2f, 0x00];
        bytes.extend_from_slice(&(body.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&body);
        let notes = parse_midi_notes(&bytes).unwrap().notes;
        assert_eq!(notes.len(), 1);
        assert!((notes[0].offset - 0.5).abs() < 1e-12);
    }

    #[test]
    fn malformed_midi_is_an_error() {
        assert!(matches!(
            parse_midi_notes(b"not a midi file"),
            Err(Error::Midi(_))
        ));
    }

    #[test]
    fn midi_file_to_roll() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mid");
        notes_to_midi(&[NoteEvent::new(60, 0.0, 0.5).unwrap()], &path).unwrap();
        let (roll, dropped) = midi_to_roll(&path, 31.25, 40).unwrap();
        assert_eq!(dropped, 0);
        let row = roll.data().row(39);
        assert!(row.iter().take(15).all(|&v| v == 1.0));
        assert!(row.iter().skip(15).all(|&v| v == 0.0));

        let empty = dir.path().join("b.mid");
        notes_to_midi(&[], &empty).unwrap();
        assert_eq!(midi_to_roll(&empty, 31.25, 40).unwrap().0.active_cells(), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn roll_midi_roll_identity(seed in any::<u64>(), frames in 1usize..200) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data = Array2::from_shape_fn((88, frames), |_| {
                    if rng.gen_bool(0.2) { 1.0 } else { 0.0 }
                });
                let roll = PianoRoll::new(data, 31.25).unwrap();
                let bytes = notes_to_midi_bytes(&roll_to_notes(&roll).unwrap()).unwrap();
                let notes = parse_midi_notes(&bytes).unwrap().notes;
                let (back, _) = notes_to_roll(&notes, 31.25, frames).unwrap();
                prop_assert_eq!(back, roll);
            }
        }
    }
}
