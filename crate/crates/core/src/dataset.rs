//! Dataset manifests, ingestion of MAESTRO, MAPS and flat directory trees,
//! the synthetic toy generator, and loading manifests into training examples.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::features::{load_and_resample, write_wav, AudioSegment, FeatureCache, MelExtractor};
use crate::pianoroll::{notes_to_midi, notes_to_roll, read_midi_notes, sort_notes, NoteEvent};
use crate::trainer::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train, validation or test"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Paired,
    RollsOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    pub midi: PathBuf,
    pub split: Split,
}

/// A list of (audio, MIDI) pairs or MIDI-only entries with split labels.
///
/// Relative paths are resolved against the manifest file's directory when
/// loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: ManifestKind,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            match (self.kind, &e.audio) {
                (ManifestKind::Paired, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "paired manifest entry {} has no audio",
                        e.midi.display()
                    )))
                }
                (ManifestKind::RollsOnly, Some(a)) => {
                    return Err(Error::InvalidArgument(format!(
                        "rolls-only manifest entry has audio {}",
                        a.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Same entries with audio dropped.
    pub fn into_rolls_only(self) -> Self {
        Self {
            kind: ManifestKind::RollsOnly,
            entries: self
                .entries
                .into_iter()
                .map(|e| ManifestEntry { audio: None, ..e })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            e.midi = base.join(&e.midi);
            e.audio = e.audio.take().map(|a| base.join(a));
        }
        Ok(m)
    }
}

/// Directory conventions understood by [`ingest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Maestro,
    Maps,
    Flat,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maestro" => Ok(Layout::Maestro),
            "maps" => Ok(Layout::Maps),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::InvalidArgument(format!(
                "unknown layout {other:?}, expected maestro, maps or flat"
            ))),
        }
    }
}

/// Result of ingesting a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    /// Entries found in metadata or on disk before exclusions.
    pub scanned: usize,
    /// Paths referenced but missing, or files without a counterpart.
    pub dangling: Vec<PathBuf>,
    /// Training entries removed because their piece also appears in test.
    pub overlap_removed: Vec<PathBuf>,
}

/// Builds a manifest from a local directory tree.
pub fn ingest(root: &Path, layout: Layout, overlap_filter: bool) -> Result<IngestReport> {
    ensure!(
        root.is_dir(),
        Layout,
        "{} is not a directory",
        root.display()
    );
    let report = match layout {
        Layout::Maestro => ingest_maestro(root)?,
        Layout::Maps => ingest_maps(root, overlap_filter)?,
        Layout::Flat => ingest_flat(root)?,
    };
    debug_assert_eq!(
        report.manifest.entries.len() + report.overlap_removed.len(),
        report.scanned - report.dangling.len()
    );
    log::info!(
        "ingested {} entries from {} ({} dangling, {} removed as overlapping)",
        report.manifest.entries.len(),
        root.display(),
        report.dangling.len(),
        report.overlap_removed.len()
    );
    Ok(report)
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

const MIDI_EXTS: &[&str] = &["mid", "midi"];
const AUDIO_EXTS: &[&str] = &["wav"];

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

struct MaestroRow {
    split: String,
    midi: String,
    audio: String,
}

fn maestro_rows_json(value: &serde_json::Value) -> Result<Vec<MaestroRow>> {
    let field = |obj: &serde_json::Value, key: &str| -> Result<String> {
        obj.get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Layout(format!("MAESTRO metadata lacks {key:?}")))
    };
    match value {
        serde_json::Value::Array(rows) => rows
            .iter()
            .map(|r| {
                Ok(MaestroRow {
                    split: field(r, "split")?,
                    midi: field(r, "midi_filename")?,
                    audio: field(r, "audio_filename")?,
                })
            })
            .collect(),
        serde_json::Value::Object(cols) => {
            let col = |key: &str| -> Result<&serde_json::Map<String, serde_json::Value>> {
                cols.get(key)
                    .and_then(|c| c.as_object())
                    .ok_or_else(|| Error::Layout(format!("MAESTRO metadata lacks column {key:?}")))
            };
            let (split, midi, audio) = (col("split")?, col("midi_filename")?, col("audio_filename")?);
            let mut keys: Vec<&String> = split.keys().collect();
            keys.sort_by_key(|k| k.parse::<u64>().unwrap_or(u64::MAX));
            keys.into_iter()
                .map(|k| {
                    let get = |c: &serde_json::Map<String, serde_json::Value>| {
                        c.get(k).and_then(|v| v.as_str()).map(str::to_string).ok_or_else(|| {
                            Error::Layout(format!("MAESTRO metadata row {k} is incomplete"))
                        })
                    };
                    Ok(MaestroRow {
                        split: get(split)?,
                        midi: get(midi)?,
                        audio: get(audio)?,
                    })
                })
                .collect()
        }
        _ => Err(Error::Layout("MAESTRO metadata must be a JSON list or column map".into())),
    }
}

fn maestro_rows_csv(path: &Path) -> Result<Vec<MaestroRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Layout(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Layout(format!("{}: {e}", path.display())))?
        .clone();
    let idx = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Layout(format!("{} lacks column {name:?}", path.display())))
    };
    let (si, mi, ai) = (idx("split")?, idx("midi_filename")?, idx("audio_filename")?);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Layout(format!("{}: {e}", path.display())))?;
        rows.push(MaestroRow {
            split: rec.get(si).unwrap_or_default().to_string(),
            midi: rec.get(mi).unwrap_or_default().to_string(),
            audio: rec.get(ai).unwrap_or_default().to_string(),
        });
    }
    Ok(rows)
}

fn ingest_maestro(root: &Path) -> Result<IngestReport> {
    let files = list_dir(root)?;
    let meta = |ext: &str| {
        files.iter().find(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("maestro-v") && n.ends_with(ext))
        })
    };
    let rows = if let Some(json) = meta(".json") {
        let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        maestro_rows_json(&serde_json::from_str(&text)?)?
    } else if let Some(csv) = meta(".csv") {
        maestro_rows_csv(csv)?
    } else {
        return Err(Error::Layout(format!(
            "{} has no maestro-v*.json or maestro-v*.csv metadata file",
            root.display()
        )));
    };
    let scanned = rows.len();
    let mut entries = Vec::new();
    let mut dangling = Vec::new();
    for row in rows {
        let split: Split = row.split.parse()?;
        let midi = root.join(&row.midi);
        let audio = root.join(&row.audio);
        match (midi.is_file(), audio.is_file()) {
            (true, true) => entries.push(ManifestEntry {
                audio: Some(audio),
                midi,
                split,
            }),
            (false, _) => dangling.push(midi),
            (true, false) => dangling.push(audio),
        }
    }
    Ok(IngestReport {
        manifest: DatasetManifest {
            kind: ManifestKind::Paired,
            entries,
        },
        scanned,
        dangling,
        overlap_removed: vec![],
    })
}

/// Instruments whose recordings form the MAPS test split.
pub const MAPS_TEST_INSTRUMENTS: [&str; 2] = ["ENSTDkCl", "ENSTDkAm"];

/// Piece name of a `MAPS_MUS-<piece>_<instrument>` stem.
fn maps_piece<'a>(stem: &'a str, instrument: &str) -> Option<&'a str> {
    stem.strip_prefix("MAPS_MUS-")?
        .strip_suffix(instrument)?
        .strip_suffix('_')
}

fn ingest_maps(root: &Path, overlap_filter: bool) -> Result<IngestReport> {
    let mut found: Vec<(String, ManifestEntry)> = Vec::new();
    let mut dangling = Vec::new();
    let mut scanned = 0;
    for inst_dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let instrument = inst_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mus = inst_dir.join("MUS");
        if !mus.is_dir() {
            continue;
        }
        let split = if MAPS_TEST_INSTRUMENTS.contains(&instrument.as_str()) {
            Split::Test
        } else {
            Split::Train
        };
        let files = list_dir(&mus)?;
        for midi in files.iter().filter(|p| has_ext(p, MIDI_EXTS)) {
            let stem = midi.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some(piece) = maps_piece(stem, &instrument) else {
                continue;
            };
            scanned += 1;
            let audio = midi.with_extension("wav");
            if !audio.is_file() {
                dangling.push(midi.clone());
                continue;
            }
            found.push((
                piece.to_string(),
                ManifestEntry {
                    audio: Some(audio),
                    midi: midi.clone(),
                    split,
                },
            ));
        }
        for wav in files.iter().filter(|p| has_ext(p, AUDIO_EXTS)) {
            let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if maps_piece(stem, &instrument).is_some() && !files.iter().any(|m| has_ext(m, MIDI_EXTS) && m.file_stem() == wav.file_stem()) {
                scanned += 1;
                dangling.push(wav.clone());
            }
        }
    }
    if scanned == 0 {
        return Err(Error::Layout(format!(
            "{} contains no <instrument>/MUS/MAPS_MUS-<piece>_<instrument>.mid files",
            root.display()
        )));
    }
    let test_pieces: BTreeSet<String> = found
        .iter()
        .filter(|(_, e)| e.split == Split::Test)
        .map(|(p, _)| p.clone())
        .collect();
    let mut entries = Vec::new();
    let mut overlap_removed = Vec::new();
    for (piece, entry) in found {
        if overlap_filter && entry.split == Split::Train && test_pieces.contains(&piece) {
            log::info!("removing {} (piece {piece} is in the test split)", entry.midi.display());
            overlap_removed.push(entry.midi);
        } else {
            entries.push(entry);
        }
    }
    Ok(IngestReport {
        manifest: DatasetManifest {
            kind: ManifestKind::Paired,
            entries,
        },
        scanned,
        dangling,
        overlap_removed,
    })
}

fn ingest_flat(root: &Path) -> Result<IngestReport> {
    let mut dirs: Vec<(PathBuf, Split)> = Vec::new();
    for (name, split) in [("train", Split::Train), ("validation", Split::Validation), ("test", Split::Test)] {
        let d = root.join(name);
        if d.is_dir() {
            dirs.push((d, split));
        }
    }
    dirs.push((root.to_path_buf(), Split::Train));

    let mut midis: Vec<(PathBuf, Split)> = Vec::new();
    let mut wavs: BTreeMap<PathBuf, Split> = BTreeMap::new();
    for (dir, split) in &dirs {
        for p in list_dir(dir)? {
            if !p.is_file() {
                continue;
            }
            if has_ext(&p, MIDI_EXTS) {
                midis.push((p, *split));
            } else if has_ext(&p, AUDIO_EXTS) {
                wavs.insert(p, *split);
            }
        }
    }
    if midis.is_empty() {
        return Err(Error::Layout(format!(
            "{} contains no .mid files (flat layout: <stem>.mid with optional <stem>.wav, optionally under train/, validation/, test/)",
            root.display()
        )));
    }
    let paired = !wavs.is_empty();
    let scanned = midis.len() + wavs.len();
    let mut entries = Vec::new();
    let mut dangling = Vec::new();
    let mut used_wavs = BTreeSet::new();
    for (midi, split) in midis {
        let wav = midi.with_extension("wav");
        if paired {
            if wavs.contains_key(&wav) {
                used_wavs.insert(wav.clone());
                entries.push(ManifestEntry {
                    audio: Some(wav),
                    midi,
                    split,
                });
            } else {
                dangling.push(midi);
            }
        } else {
            entries.push(ManifestEntry {
                audio: None,
                midi,
                split,
            });
        }
    }
    for wav in wavs.keys() {
        if !used_wavs.contains(wav) {
            dangling.push(wav.clone());
        }
    }
    // A paired entry accounts for two scanned files.
    let scanned = scanned - if paired { entries.len() } else { 0 };
    Ok(IngestReport {
        manifest: DatasetManifest {
            kind: if paired {
                ManifestKind::Paired
            } else {
                ManifestKind::RollsOnly
            },
            entries,
        },
        scanned,
        dangling,
        overlap_removed: vec![],
    })
}

/// Settings of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub sample_rate: u32,
    /// Length of each item in samples.
    pub samples: usize,
    /// Onsets and offsets fall on multiples of `hop / sample_rate` seconds.
    pub hop_length: usize,
    pub notes_per_second: f64,
    pub min_pitch: u8,
    pub max_pitch: u8,
    pub min_frames: usize,
    pub max_frames: usize,
    pub amplitude: f32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            samples: crate::features::SEGMENT_SAMPLES,
            hop_length: 512,
            notes_per_second: 3.0,
            min_pitch: 60,
            max_pitch: 96,
            min_frames: 4,
            max_frames: 16,
            amplitude: 0.2,
        }
    }
}

/// One generated item.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyItem {
    pub notes: Vec<NoteEvent>,
    pub audio: AudioSegment,
}

/// Random sparse notes on the frame grid; same-pitch notes keep at least a
/// one-frame gap.
pub fn toy_notes<R: Rng>(config: &ToyConfig, rng: &mut R) -> Result<Vec<NoteEvent>> {
    ensure!(
        config.min_pitch <= config.max_pitch && config.min_frames >= 1 && config.min_frames <= config.max_frames,
        InvalidArgument,
        "invalid toy configuration"
    );
    let frames = config.samples / config.hop_length;
    ensure!(frames > config.max_frames, InvalidArgument, "toy item is shorter than a note");
    let frame_s = config.hop_length as f64 / config.sample_rate as f64;
    let target = (config.notes_per_second * config.samples as f64 / config.sample_rate as f64).round() as usize;
    let mut busy: BTreeMap<u8, Vec<(usize, usize)>> = BTreeMap::new();
    let mut notes = Vec::with_capacity(target);
    let mut attempts = 0;
    while notes.len() < target && attempts < target * 50 {
        attempts += 1;
        let pitch = rng.gen_range(config.min_pitch..=config.max_pitch);
        let len = rng.gen_range(config.min_frames..=config.max_frames);
        let start = rng.gen_range(0..frames - len);
        let spans = busy.entry(pitch).or_default();
        if spans.iter().any(|&(a, b)| start <= b && a <= start + len) {
            continue;
        }
        spans.push((start, start + len));
        notes.push(NoteEvent::new(
            pitch,
            start as f64 * frame_s,
            (start + len) as f64 * frame_s,
        )?);
    }
    sort_notes(&mut notes);
    Ok(notes)
}

/// Additive sine rendering at each note's fundamental with 4 ms ramps.
pub fn render_notes(notes: &[NoteEvent], config: &ToyConfig) -> AudioSegment {
    let sr = config.sample_rate as f64;
    let mut out = vec![0f64; config.samples];
    let ramp = (0.004 * sr) as usize;
    for n in notes {
        let freq = 440.0 * 2f64.powf((n.pitch as f64 - 69.0) / 12.0);
        let a = ((n.onset * sr).round() as usize).min(config.samples);
        let b = ((n.offset * sr).round() as usize).min(config.samples);
        let len = b - a;
        for (k, sample) in out[a..b].iter_mut().enumerate() {
            let env = (k.min(len - k) as f64 / ramp.max(1) as f64).min(1.0);
            *sample += config.amplitude as f64 * env * (2.0 * std::f64::consts::PI * freq * k as f64 / sr).sin();
        }
    }
    let peak = out.iter().fold(0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.95 { 0.95 / peak } else { 1.0 };
    AudioSegment {
        samples: out.into_iter().map(|v| (v * gain) as f32).collect(),
        sample_rate: config.sample_rate,
    }
}

/// Generates one toy item from a seed.
pub fn toy_item(config: &ToyConfig, seed: u64, index: u64) -> Result<ToyItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let notes = toy_notes(config, &mut rng)?;
    let audio = render_notes(&notes, config);
    Ok(ToyItem { notes, audio })
}

/// Writes `num_items` paired toy items (`toy_XXXX.wav`/`.mid`, all in the
/// train split) and `manifest.json` to `out_dir`.
pub fn make_toy_dataset(num_items: usize, seed: u64, out_dir: &Path, config: &ToyConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(num_items);
    for i in 0..num_items {
        let item = toy_item(config, seed, i as u64)?;
        let stem = format!("toy_{i:04}");
        write_wav(out_dir.join(format!("{stem}.wav")), &item.audio)?;
        notes_to_midi(&item.notes, out_dir.join(format!("{stem}.mid")))?;
        entries.push(ManifestEntry {
            audio: Some(PathBuf::from(format!("{stem}.wav"))),
            midi: PathBuf::from(format!("{stem}.mid")),
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest {
        kind: ManifestKind::Paired,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// How manifest entries become training examples.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Cut pieces into segments of this many frames; a trailing partial
    /// segment is kept only when the piece has no full one.
    pub segment_frames: Option<usize>,
    pub cache: Option<FeatureCache>,
    pub exec: Execution,
}

fn segments(example: TrainingExample, segment: Option<usize>) -> Vec<TrainingExample> {
    let Some(len) = segment else {
        return vec![example];
    };
    let n = example.num_frames();
    if n <= len {
        return vec![example];
    }
    (0..n / len)
        .map(|k| {
            let w = s![.., k * len..(k + 1) * len];
            TrainingExample {
                roll: example.roll.slice(w).to_owned(),
                mel: example.mel.as_ref().map(|m| m.slice(w).to_owned()),
            }
        })
        .collect()
}

/// Loads one entry: the conditioner from audio when present, and the roll
/// rasterized to the conditioner's frame count (or to the last offset).
pub fn load_entry(entry: &ManifestEntry, extractor: &MelExtractor, cache: Option<&FeatureCache>) -> Result<TrainingExample> {
    let fr = extractor.config().frame_rate();
    let notes = read_midi_notes(&entry.midi)?.notes;
    match &entry.audio {
        Some(audio) => {
            let cond = match cache {
                Some(c) => c.conditioner(audio, extractor)?,
                None => extractor.conditioner(&load_and_resample(audio)?)?,
            };
            let (roll, _) = notes_to_roll(&notes, fr, cond.num_frames())?;
            TrainingExample::paired(roll.into_data(), cond.into_data())
        }
        None => {
            let last = notes.iter().map(|n| n.offset).fold(0.0, f64::max);
            let frames = ((last * fr).ceil() as usize).max(1);
            let (roll, _) = notes_to_roll(&notes, fr, frames)?;
            TrainingExample::rolls_only(roll.into_data())
        }
    }
}

/// Loads the entries of `split`, in manifest order.
pub fn load_examples(
    manifest: &DatasetManifest,
    split: Split,
    extractor: &MelExtractor,
    options: &LoadOptions,
) -> Result<Vec<TrainingExample>> {
    let entries = manifest.split(split);
    let loaded = options
        .exec
        .map(entries.len(), |i| load_entry(entries[i], extractor, options.cache.as_ref()));
    let mut out = Vec::new();
    for ex in loaded {
        out.extend(segments(ex?, options.segment_frames));
    }
    Ok(out)
}

/// Copies a roll to exactly `frames` columns, padding with zeros.
pub fn pad_roll(roll: &Array2<f32>, frames: usize) -> Array2<f32> {
    let mut out = Array2::zeros((roll.nrows(), frames));
    let n = frames.min(roll.ncols());
    out.slice_mut(s![.., ..n]).assign(&roll.slice(s![.., ..n]));
    out
}
