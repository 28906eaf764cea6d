use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "diffroll", version, about = "Piano transcription, generation and inpainting with a conditional diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file of key-value settings (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run without data parallelism.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on paired audio and MIDI.
    Train(TrainArgs),
    /// Train the unconditional mode on MIDI alone (or mix with --scheme p0-plus-1).
    Pretrain(TrainArgs),
    /// Transcribe a WAV file or every entry of a manifest.
    Transcribe(TranscribeArgs),
    /// Generate piano rolls without audio.
    Generate(GenerateArgs),
    /// Transcribe with a span of the audio masked out and regenerated.
    Inpaint(InpaintArgs),
    /// Score predicted MIDI files against references.
    Evaluate(EvaluateArgs),
    /// Print a checkpoint's metadata.
    InspectCheckpoint(InspectArgs),
    /// Write a synthetic paired dataset.
    MakeToy(MakeToyArgs),
    /// Build a manifest from a MAESTRO, MAPS or flat directory tree.
    Ingest(IngestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Residual channels.
    #[arg(long)]
    pub residual_channels: Option<usize>,
    /// Residual layers.
    #[arg(long)]
    pub num_layers: Option<usize>,
    /// Convolution kernel size.
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// Dilation cycle, e.g. "1" or "1,2,4,8".
    #[arg(long, value_delimiter = ',')]
    pub dilation_cycle: Option<Vec<usize>>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Paired manifest (audio + MIDI).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest whose MIDI files serve as unpaired rolls.
    #[arg(long)]
    pub rolls_manifest: Option<PathBuf>,
    /// supervised, unpaired-pretrain or p0-plus-1.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Conditioner dropout probability.
    #[arg(long)]
    pub dropout_p: Option<f64>,
    /// Fraction of paired batches in the p0-plus-1 scheme.
    #[arg(long)]
    pub paired_fraction: Option<f64>,
    /// Train on random windows of this many frames.
    #[arg(long)]
    pub crop_frames: Option<usize>,
    /// Cut pieces into segments of this many frames when loading.
    #[arg(long)]
    pub segment_frames: Option<usize>,
    /// Zero input and fixed step: the discriminative baseline.
    #[arg(long)]
    pub discriminative: bool,
    /// Continue from --checkpoint including optimizer state and step count.
    #[arg(long)]
    pub resume: bool,
    /// Save a checkpoint every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Line-delimited JSON training log (default: <out>.log.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for cached conditioners.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Leave Adam moments out of the checkpoint.
    #[arg(long)]
    pub no_optimizer_state: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Guidance weight.
    #[arg(long, allow_hyphen_values = true)]
    pub w: Option<f64>,
    /// ddpm or ddim.
    #[arg(long)]
    pub sigma_mode: Option<String>,
    /// Binarization threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Diffusion steps; must match the checkpoint.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TranscribeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// WAV file or manifest JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Manifest split to transcribe.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Frames to generate.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Number of independent samples.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// WAV file.
    #[arg(long)]
    pub input: PathBuf,
    /// Start of the masked span in seconds.
    #[arg(long)]
    pub mask_start: f64,
    /// End of the masked span in seconds.
    #[arg(long)]
    pub mask_end: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of predicted MIDI files.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of reference MIDI files with matching names.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// Onset tolerance in seconds.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Line-delimited JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Include the full schedule table.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MakeToyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub items: usize,
    /// Length of each item.
    #[arg(long, default_value_t = 20.48)]
    pub seconds: f64,
    #[arg(long)]
    pub notes_per_second: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub root: PathBuf,
    /// maestro, maps or flat.
    #[arg(long)]
    pub layout: String,
    /// Drop training pieces that also occur in the test split (MAPS).
    #[arg(long)]
    pub overlap_filter: bool,
    /// Manifest output path.
    #[arg(long)]
    pub out: PathBuf,
}
