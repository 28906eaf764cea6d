//! On-disk conditioner cache keyed by audio content and feature settings.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{NpzReader, NpzWriter};
use sha2::{Digest, Sha256};

use super::audio::load_and_resample;
use super::mel::{MelConditioner, MelExtractor};
use crate::error::{Error, Result};

/// Stores conditioners as compressed `.npz` files under a directory.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    /// Cache file for the given audio bytes and extractor settings.
    pub fn key_path(&self, audio_bytes: &[u8], extractor: &MelExtractor) -> Result<PathBuf> {
        let audio_hash = hex(&Sha256::digest(audio_bytes));
        let config_json = serde_json::to_vec(extractor.config())?;
        let config_hash = hex(&Sha256::digest(config_json));
        Ok(self
            .dir
            .join(format!("{}-{}.npz", &audio_hash[..32], &config_hash[..16])))
    }

    /// Returns the cached conditioner for `audio`, computing and storing it on
    /// a miss.
    pub fn conditioner(&self, audio: &Path, extractor: &MelExtractor) -> Result<MelConditioner> {
        let bytes = std::fs::read(audio).map_err(|e| Error::io(audio, e))?;
        let path = self.key_path(&bytes, extractor)?;
        if path.exists() {
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut npz = NpzReader::new(file)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            let data: Array2<f32> = npz
                .by_name("mel")
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            return MelConditioner::new(data);
        }
        let cond = extractor.conditioner(&load_and_resample(audio)?)?;
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut npz = NpzWriter::new_compressed(file);
        npz.add_array("mel", cond.data())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        npz.finish()
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(cond)
    }
}
