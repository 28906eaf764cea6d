//! Audio ingestion and the log-mel conditioner.

mod audio;
mod cache;
mod mel;

pub use audio::{
    load_and_resample, read_wav, resample, write_wav, AudioSegment, SEGMENT_SAMPLES,
    TARGET_SAMPLE_RATE,
};
pub use cache::FeatureCache;
pub use mel::{FeatureConfig, MaskSelector, MelConditioner, MelExtractor};
