//! The `diffroll` command-line tool.
//!
//! Settings resolve in the order: flags, then the `--config` file, then
//! values stored in `--checkpoint`, then built-in defaults. A feature or
//! schedule setting that disagrees with the checkpoint is an error.

pub mod args;
pub mod settings;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use ndarray_npy::NpzWriter;
use serde::Serialize;

use diffroll::checkpoint::{self, Checkpoint, Provenance};
use diffroll::dataset::{self, DatasetManifest, Layout, LoadOptions, ManifestKind, Split, ToyConfig};
use diffroll::evaluation::{evaluate_corpus, DEFAULT_ONSET_TOLERANCE};
use diffroll::exec::Execution;
use diffroll::features::{load_and_resample, FeatureCache, FeatureConfig, MaskSelector, MelConditioner, MelExtractor};
use diffroll::model::{DenoiserConfig, DenoiserModel};
use diffroll::pianoroll::{notes_to_midi, roll_to_notes};
use diffroll::sampler::{sample_batch, transcribe_direct, SampleOutput, SamplerConfig, DEFAULT_GENERATION_FRAMES};
use diffroll::schedule::{NoiseSchedule, SigmaMode};
use diffroll::trainer::{Scheme, StepRecord, TrainConfig, Trainer};

use args::{Cli, Command, Common, EvaluateArgs, GenerateArgs, IngestArgs, InpaintArgs, InspectArgs, MakeToyArgs, SamplingArgs, TrainArgs, TranscribeArgs};
use settings::{resolve, resolve_opt, ConfigFile};

/// Exit status when evaluation could not pair every file.
pub const EXIT_INCOMPLETE: i32 = 2;

/// Segment length used to cut training pieces by default.
pub const DEFAULT_SEGMENT_FRAMES: usize = 640;

const FEATURE_KEYS: &[&str] = &["sample_rate", "n_fft", "hop_length", "n_mels", "f_min", "f_max", "log_floor"];
const MODEL_KEYS: &[&str] = &["residual_channels", "num_layers", "kernel_size", "dilation_cycle", "time_embedding_dim", "steps"];
const TRAIN_KEYS: &[&str] = &[
    "seed", "scheme", "iterations", "batch_size", "learning_rate", "dropout_p", "paired_fraction",
    "crop_frames", "segment_frames", "discriminative", "checkpoint_every", "beta1", "beta2", "adam_eps",
];
const SAMPLING_KEYS: &[&str] = &["seed", "w", "sigma_mode", "threshold", "steps"];

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

/// Parses arguments and runs the subcommand; returns the exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => train(a, Scheme::Supervised),
        Command::Pretrain(a) => train(a, Scheme::UnpairedPretrain),
        Command::Transcribe(a) => transcribe(a),
        Command::Generate(a) => generate(a),
        Command::Inpaint(a) => inpaint(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::MakeToy(a) => make_toy(a),
        Command::Ingest(a) => ingest(a),
    }
}

fn execution(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn load_checkpoint(common: &Common) -> Result<Option<Checkpoint>> {
    common
        .checkpoint
        .as_deref()
        .map(|p| {
            if !p.exists() {
                bail!("checkpoint {} does not exist", p.display());
            }
            Ok(checkpoint::load(p)?)
        })
        .transpose()
}

fn require_checkpoint(common: &Common, what: &str) -> Result<Checkpoint> {
    load_checkpoint(common)?.ok_or_else(|| anyhow!("{what} needs --checkpoint"))
}

/// Feature settings: checkpoint (or defaults) overridden by the config file.
/// Any disagreement with the checkpoint is an error.
pub fn resolve_features(file: &ConfigFile, ckpt: Option<&Checkpoint>) -> Result<FeatureConfig> {
    let base = ckpt.map_or_else(FeatureConfig::default, |c| c.header.features.clone());
    let f = FeatureConfig {
        sample_rate: resolve(None, file, "sample_rate", base.sample_rate)?,
        n_fft: resolve(None, file, "n_fft", base.n_fft)?,
        hop_length: resolve(None, file, "hop_length", base.hop_length)?,
        n_mels: resolve(None, file, "n_mels", base.n_mels)?,
        f_min: resolve(None, file, "f_min", base.f_min)?,
        f_max: resolve(None, file, "f_max", base.f_max)?,
        log_floor: resolve(None, file, "log_floor", base.log_floor)?,
    };
    if let Some(c) = ckpt {
        c.check_compatible(&f, c.header.schedule.steps)?;
    }
    Ok(f)
}

/// Diffusion steps for sampling; must equal the checkpoint's.
fn resolve_steps(flag: Option<usize>, file: &ConfigFile, ckpt: &Checkpoint, features: &FeatureConfig) -> Result<usize> {
    let steps = resolve(flag, file, "steps", ckpt.header.schedule.steps)?;
    ckpt.check_compatible(features, steps)?;
    Ok(steps)
}

/// Sampler settings for a checkpoint.
pub fn resolve_sampler(s: &SamplingArgs, seed: Option<u64>, file: &ConfigFile, ckpt: &Checkpoint, features: &FeatureConfig) -> Result<SamplerConfig> {
    let defaults = SamplerConfig::default();
    let sigma: String = resolve(s.sigma_mode.clone(), file, "sigma_mode", defaults.sigma_mode.to_string())?;
    Ok(SamplerConfig {
        w: resolve(s.w, file, "w", defaults.w)?,
        sigma_mode: sigma.parse::<SigmaMode>()?,
        steps: resolve_steps(s.steps, file, ckpt, features)?,
        seed: resolve(seed, file, "seed", ckpt.header.provenance.seed)?,
        threshold: resolve(s.threshold, file, "threshold", defaults.threshold)?,
        snapshot_every: None,
    })
}

/// Model shape for a fresh run, or the checkpoint's (conflicting requests
/// are errors).
pub fn resolve_model(m: &args::ModelArgs, file: &ConfigFile, ckpt: Option<&Checkpoint>, features: &FeatureConfig) -> Result<DenoiserConfig> {
    let base = ckpt.map_or_else(
        || DenoiserConfig {
            mel_bins: features.n_mels,
            ..DenoiserConfig::default()
        },
        |c| c.header.model.clone(),
    );
    let cfg = DenoiserConfig {
        residual_channels: resolve(m.residual_channels, file, "residual_channels", base.residual_channels)?,
        num_layers: resolve(m.num_layers, file, "num_layers", base.num_layers)?,
        kernel_size: resolve(m.kernel_size, file, "kernel_size", base.kernel_size)?,
        dilation_pattern: resolve(m.dilation_cycle.clone(), file, "dilation_cycle", base.dilation_pattern.clone())?,
        time_embedding_dim: resolve(None, file, "time_embedding_dim", base.time_embedding_dim)?,
        diffusion_steps: resolve(m.steps, file, "steps", base.diffusion_steps)?,
        ..base.clone()
    };
    if let Some(c) = ckpt {
        if cfg.diffusion_steps != c.header.schedule.steps {
            return Err(diffroll::Error::ConfigMismatch(format!(
                "checkpoint was trained with T = {}, requested T = {}",
                c.header.schedule.steps, cfg.diffusion_steps
            ))
            .into());
        }
        if cfg != base {
            bail!("model settings conflict with the checkpoint's architecture");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training settings: defaults, then the checkpoint's recorded settings,
/// then the config file, then flags.
pub fn resolve_train(a: &TrainArgs, default_scheme: Scheme, file: &ConfigFile, ckpt: Option<&Checkpoint>, steps: usize) -> Result<TrainConfig> {
    let base = ckpt
        .and_then(|c| c.header.provenance.train_config.clone())
        .unwrap_or_else(|| TrainConfig {
            scheme: default_scheme,
            ..TrainConfig::default()
        });
    let scheme = match a.scheme.clone().or(file.get::<String>("scheme")?) {
        Some(s) => s.parse::<Scheme>()?,
        None if a.resume => base.scheme,
        None => default_scheme,
    };
    let cfg = TrainConfig {
        dropout_p: resolve(a.dropout_p, file, "dropout_p", base.dropout_p)?,
        diffusion_steps: steps,
        batch_size: resolve(a.batch_size, file, "batch_size", base.batch_size)?,
        learning_rate: resolve(a.learning_rate, file, "learning_rate", base.learning_rate)?,
        beta1: resolve(None, file, "beta1", base.beta1)?,
        beta2: resolve(None, file, "beta2", base.beta2)?,
        adam_eps: resolve(None, file, "adam_eps", base.adam_eps)?,
        iterations: resolve(a.iterations, file, "iterations", base.iterations)?,
        seed: resolve(a.common.seed, file, "seed", base.seed)?,
        scheme,
        paired_fraction: resolve(a.paired_fraction, file, "paired_fraction", base.paired_fraction)?,
        crop_frames: resolve_opt(a.crop_frames, file, "crop_frames", base.crop_frames)?,
        discriminative: resolve(a.discriminative.then_some(true), file, "discriminative", base.discriminative)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reproduction record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, S: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub arguments: Vec<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<CheckpointRef>,
    pub settings: S,
}

#[derive(Debug, Serialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

fn checkpoint_ref(common: &Common) -> Result<Option<CheckpointRef>> {
    common
        .checkpoint
        .as_ref()
        .map(|p| {
            Ok(CheckpointRef {
                path: p.clone(),
                sha256: checkpoint::file_hash(p)?,
            })
        })
        .transpose()
}

fn write_record<S: Serialize>(path: &Path, command: &str, common: &Common, seed: Option<u64>, settings: S) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        arguments: std::env::args().collect(),
        seed,
        checkpoint: checkpoint_ref(common)?,
        settings,
    };
    let json = serde_json::to_string_pretty(&record)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    train: &'a TrainConfig,
    model: &'a DenoiserConfig,
    features: &'a FeatureConfig,
    manifest: Option<&'a Path>,
    rolls_manifest: Option<&'a Path>,
    segment_frames: usize,
    resumed_from_step: u64,
}

fn train(a: TrainArgs, default_scheme: Scheme) -> Result<i32> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&keys(&[FEATURE_KEYS, MODEL_KEYS, TRAIN_KEYS]))?;
    let ckpt = load_checkpoint(&a.common)?;
    if a.resume && ckpt.is_none() {
        bail!("--resume needs --checkpoint");
    }
    let features = resolve_features(&file, ckpt.as_ref())?;
    let model_cfg = resolve_model(&a.model, &file, ckpt.as_ref(), &features)?;
    let cfg = resolve_train(&a, default_scheme, &file, ckpt.as_ref(), model_cfg.diffusion_steps)?;
    let segment_frames = resolve(a.segment_frames, &file, "segment_frames", DEFAULT_SEGMENT_FRAMES)?;
    let checkpoint_every = resolve_opt(a.checkpoint_every, &file, "checkpoint_every", None)?;
    let exec = execution(&a.common);

    let extractor = MelExtractor::new(features.clone())?;
    let load_opts = LoadOptions {
        segment_frames: Some(segment_frames),
        cache: a.cache_dir.as_ref().map(FeatureCache::new).transpose()?,
        exec,
    };
    let load = |path: &Path, rolls: bool| -> Result<Vec<diffroll::trainer::TrainingExample>> {
        let mut m = DatasetManifest::load(path)?;
        if rolls {
            m = m.into_rolls_only();
        } else if m.kind != ManifestKind::Paired {
            bail!("{} is not a paired manifest", path.display());
        }
        let data = dataset::load_examples(&m, Split::Train, &extractor, &load_opts)?;
        log::info!("loaded {} training segments from {}", data.len(), path.display());
        Ok(data)
    };
    let (paired, unpaired) = match cfg.scheme {
        Scheme::Supervised => {
            let m = a.manifest.as_deref().ok_or_else(|| anyhow!("supervised training needs --manifest"))?;
            (load(m, false)?, Vec::new())
        }
        Scheme::UnpairedPretrain => {
            let m = a
                .rolls_manifest
                .as_deref()
                .or(a.manifest.as_deref())
                .ok_or_else(|| anyhow!("pretraining needs --rolls-manifest (or --manifest)"))?;
            (Vec::new(), load(m, true)?)
        }
        Scheme::MixedP0Plus1 => {
            let (Some(p), Some(r)) = (a.manifest.as_deref(), a.rolls_manifest.as_deref()) else {
                bail!("the p0-plus-1 scheme needs both --manifest and --rolls-manifest");
            };
            (load(p, false)?, load(r, true)?)
        }
    };

    let model = match &ckpt {
        Some(c) => c.model.clone(),
        None => DenoiserModel::init(model_cfg.clone(), cfg.seed)?,
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.exec = exec;
    if a.resume {
        let c = ckpt.as_ref().unwrap();
        trainer.optimizer = c
            .adam(&cfg)
            .ok_or_else(|| anyhow!("checkpoint has no optimizer state to resume from"))?;
    }
    let start_step = trainer.step();

    write_record(
        &with_suffix(&a.out, ".provenance.json"),
        if default_scheme == Scheme::Supervised { "train" } else { "pretrain" },
        &a.common,
        Some(cfg.seed),
        TrainSettings {
            train: &cfg,
            model: &model_cfg,
            features: &features,
            manifest: a.manifest.as_deref(),
            rolls_manifest: a.rolls_manifest.as_deref(),
            segment_frames,
            resumed_from_step: start_step,
        },
    )?;

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let mut write_err = None;

    let total = cfg.iterations;
    let every = checkpoint_every.unwrap_or(total).max(1);
    let mut done = 0;
    while done < total {
        let n = every.min(total - done);
        trainer.run(&paired, &unpaired, n, |r: &StepRecord| {
            if let Err(e) = serde_json::to_writer(&mut log, r).map_err(std::io::Error::from).and_then(|_| writeln!(log)) {
                write_err.get_or_insert(e);
            }
            if r.step.is_multiple_of(50) {
                log::info!("step {} loss {:.5}", r.step, r.loss);
            }
        })?;
        done += n;
        log.flush()?;
        if let Some(e) = write_err.take() {
            return Err(e).context("writing training log");
        }
        let provenance = Provenance {
            step: trainer.step(),
            seed: cfg.seed,
            dropout_p: cfg.dropout_p,
            scheme: cfg.scheme,
            discriminative: cfg.discriminative,
            train_config: Some(cfg.clone()),
        };
        let opt = (!a.no_optimizer_state).then_some(&trainer.optimizer);
        checkpoint::save(&a.out, &trainer.model, &trainer.schedule, &features, provenance, opt)?;
        log::info!("saved {} at step {}", a.out.display(), trainer.step());
    }
    Ok(0)
}

fn write_outputs(dir: &Path, stem: &str, out: &SampleOutput) -> Result<()> {
    let notes = roll_to_notes(&out.roll)?;
    notes_to_midi(&notes, dir.join(format!("{stem}.mid")))?;
    let path = dir.join(format!("{stem}.npz"));
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut npz = NpzWriter::new_compressed(f);
    npz.add_array("posteriorgram", &out.raw)?;
    npz.add_array("roll", out.roll.data())?;
    npz.finish()?;
    Ok(())
}

/// Transcribes one conditioner as run `run` of the noise streams.
fn transcribe_one(ckpt: &Checkpoint, cond: &MelConditioner, cfg: &SamplerConfig, schedule: &NoiseSchedule, fr: f64, run: u64) -> Result<SampleOutput> {
    if ckpt.header.provenance.discriminative {
        return Ok(transcribe_direct(&ckpt.model, cond, cfg.threshold, fr)?);
    }
    Ok(sample_batch(&ckpt.model, std::slice::from_ref(cond), cfg, schedule, fr, run)?.remove(0))
}

#[derive(Serialize)]
struct SampleSettings<'a> {
    sampler: &'a SamplerConfig,
    features: &'a FeatureConfig,
    inputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_seconds: Option<(f64, f64)>,
}

struct Prepared {
    ckpt: Checkpoint,
    features: FeatureConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
}

fn prepare_sampling(common: &Common, s: &SamplingArgs, what: &str) -> Result<Prepared> {
    let file = ConfigFile::load(common.config.as_deref())?;
    file.check_keys(&keys(&[FEATURE_KEYS, SAMPLING_KEYS]))?;
    let ckpt = require_checkpoint(common, what)?;
    let features = resolve_features(&file, Some(&ckpt))?;
    let sampler = resolve_sampler(s, common.seed, &file, &ckpt, &features)?;
    let schedule = ckpt.schedule()?;
    Ok(Prepared {
        ckpt,
        features,
        sampler,
        schedule,
    })
}

fn transcribe(a: TranscribeArgs) -> Result<i32> {
    let p = prepare_sampling(&a.common, &a.sampling, "transcribe")?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let inputs: Vec<PathBuf> = if a.input.extension().is_some_and(|e| e == "json") {
        let m = DatasetManifest::load(&a.input)?;
        let split: Split = a.split.parse()?;
        m.split(split)
            .into_iter()
            .map(|e| e.audio.clone().ok_or_else(|| anyhow!("manifest entry {} has no audio", e.midi.display())))
            .collect::<Result<_>>()?
    } else {
        vec![a.input.clone()]
    };
    write_record(
        &a.out_dir.join("provenance.json"),
        "transcribe",
        &a.common,
        Some(p.sampler.seed),
        SampleSettings {
            sampler: &p.sampler,
            features: &p.features,
            inputs: inputs.clone(),
            frames: None,
            mask_seconds: None,
        },
    )?;
    let extractor = MelExtractor::new(p.features.clone())?;
    let fr = p.features.frame_rate();
    for (i, input) in inputs.iter().enumerate() {
        let cond = extractor.conditioner(&load_and_resample(input)?)?;
        let out = transcribe_one(&p.ckpt, &cond, &p.sampler, &p.schedule, fr, i as u64)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
        write_outputs(&a.out_dir, stem, &out)?;
        log::info!("transcribed {} ({} active cells)", input.display(), out.roll.active_cells());
    }
    Ok(0)
}

fn generate(a: GenerateArgs) -> Result<i32> {
    let p = prepare_sampling(&a.common, &a.sampling, "generate")?;
    if a.sampling.w.is_some_and(|w| w != -1.0) {
        bail!("generate always samples with w = -1; drop --w");
    }
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let frames = a.frames.unwrap_or(DEFAULT_GENERATION_FRAMES);
    if frames == 0 {
        bail!("--frames must be positive");
    }
    let cfg = SamplerConfig { w: -1.0, ..p.sampler };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_record(
        &a.out_dir.join("provenance.json"),
        "generate",
        &a.common,
        Some(cfg.seed),
        SampleSettings {
            sampler: &cfg,
            features: &p.features,
            inputs: vec![],
            frames: Some(frames),
            mask_seconds: None,
        },
    )?;
    let conds = vec![MelConditioner::fully_masked(p.ckpt.header.model.mel_bins, frames); a.count];
    let outs = sample_batch(&p.ckpt.model, &conds, &cfg, &p.schedule, p.features.frame_rate(), 0)?;
    for (i, out) in outs.iter().enumerate() {
        write_outputs(&a.out_dir, &format!("generated_{i:04}"), out)?;
    }
    Ok(0)
}

fn inpaint(a: InpaintArgs) -> Result<i32> {
    let p = prepare_sampling(&a.common, &a.sampling, "inpaint")?;
    if !(a.mask_start >= 0.0 && a.mask_end >= a.mask_start) {
        bail!("need 0 <= --mask-start <= --mask-end, got {} and {}", a.mask_start, a.mask_end);
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_record(
        &a.out_dir.join("provenance.json"),
        "inpaint",
        &a.common,
        Some(p.sampler.seed),
        SampleSettings {
            sampler: &p.sampler,
            features: &p.features,
            inputs: vec![a.input.clone()],
            frames: None,
            mask_seconds: Some((a.mask_start, a.mask_end)),
        },
    )?;
    let extractor = MelExtractor::new(p.features.clone())?;
    let fr = p.features.frame_rate();
    let cond = extractor.conditioner(&load_and_resample(&a.input)?)?;
    let mask = MaskSelector::time_range(cond.num_frames(), fr, a.mask_start, a.mask_end);
    let masked = cond.apply_mask(&mask)?;
    let out = transcribe_one(&p.ckpt, &masked, &p.sampler, &p.schedule, fr, 0)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    write_outputs(&a.out_dir, stem, &out)?;
    Ok(0)
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    File(&'a diffroll::evaluation::FileScore),
    Missing { name: &'a str, side: &'a str },
    Summary {
        files: usize,
        macro_f1: f64,
        macro_precision: f64,
        macro_recall: f64,
        no_files: bool,
        complete: bool,
        tolerance: f64,
    },
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&["seed", "tolerance"])?;
    let tol = resolve(a.tolerance, &file, "tolerance", DEFAULT_ONSET_TOLERANCE)?;
    let report = evaluate_corpus(&a.pred_dir, &a.ref_dir, tol, execution(&a.common))?;
    let mut lines: Vec<ReportLine> = report.files.iter().map(ReportLine::File).collect();
    lines.extend(report.missing_reference.iter().map(|n| ReportLine::Missing { name: n, side: "reference" }));
    lines.extend(report.missing_prediction.iter().map(|n| ReportLine::Missing { name: n, side: "prediction" }));
    lines.push(ReportLine::Summary {
        files: report.files.len(),
        macro_f1: report.macro_f1,
        macro_precision: report.macro_precision,
        macro_recall: report.macro_recall,
        no_files: report.no_files,
        complete: report.is_complete(),
        tolerance: tol,
    });
    if let Some(path) = &a.report {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for l in &lines {
            serde_json::to_writer(&mut w, l)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<40} {:>9} {:>9} {:>9} {:>6} {:>6}", "file", "precision", "recall", "f1", "pred", "ref")?;
    for f in &report.files {
        writeln!(out, "{:<40} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6}", f.name, f.precision, f.recall, f.f1, f.num_pred, f.num_ref)?;
    }
    for n in &report.missing_reference {
        writeln!(out, "{n:<40} missing reference")?;
    }
    for n in &report.missing_prediction {
        writeln!(out, "{n:<40} missing prediction")?;
    }
    if report.no_files {
        writeln!(out, "no files scored")?;
    }
    writeln!(
        out,
        "{:<40} {:>9.4} {:>9.4} {:>9.4}",
        "macro average", report.macro_precision, report.macro_recall, report.macro_f1
    )?;
    Ok(if report.is_complete() { 0 } else { EXIT_INCOMPLETE })
}

fn inspect(a: InspectArgs) -> Result<i32> {
    let path = a.common.checkpoint.as_deref().ok_or_else(|| anyhow!("inspect-checkpoint needs --checkpoint"))?;
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let mut header = checkpoint::read_header(path)?;
    if !a.table {
        header.schedule.table = format!("({} rows, pass --table to print)", header.schedule.steps + 1);
    }
    let value = serde_json::json!({
        "path": path,
        "sha256": checkpoint::file_hash(path)?,
        "header": header,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(0)
}

fn make_toy(a: MakeToyArgs) -> Result<i32> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&["seed", "notes_per_second"])?;
    let seed = resolve(a.common.seed, &file, "seed", 0)?;
    let defaults = ToyConfig::default();
    if !(a.seconds > 0.0) {
        bail!("--seconds must be positive");
    }
    let toy = ToyConfig {
        samples: (a.seconds * defaults.sample_rate as f64).round() as usize,
        notes_per_second: resolve(a.notes_per_second, &file, "notes_per_second", defaults.notes_per_second)?,
        ..defaults
    };
    let manifest = dataset::make_toy_dataset(a.items, seed, &a.out_dir, &toy)?;
    write_record(&a.out_dir.join("provenance.json"), "make-toy", &a.common, Some(seed), &toy)?;
    println!("wrote {} items to {}", manifest.entries.len(), a.out_dir.display());
    Ok(0)
}

fn ingest(a: IngestArgs) -> Result<i32> {
    let layout: Layout = a.layout.parse()?;
    let report = dataset::ingest(&a.root, layout, a.overlap_filter)?;
    report.manifest.save(&a.out)?;
    for d in &report.dangling {
        eprintln!("excluded (missing counterpart): {}", d.display());
    }
    for d in &report.overlap_removed {
        eprintln!("excluded (piece overlaps test split): {}", d.display());
    }
    println!(
        "{} entries ({} train, {} validation, {} test), {} dangling, {} removed as overlapping",
        report.manifest.entries.len(),
        report.manifest.split(Split::Train).len(),
        report.manifest.split(Split::Validation).len(),
        report.manifest.split(Split::Test).len(),
        report.dangling.len(),
        report.overlap_removed.len()
    );
    Ok(0)
}

/// Loads a posteriorgram written by `transcribe`.
pub fn read_posteriorgram(path: &Path) -> Result<Array2<f32>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut npz = ndarray_npy::NpzReader::new(f)?;
    Ok(npz.by_name("posteriorgram")?)
}
