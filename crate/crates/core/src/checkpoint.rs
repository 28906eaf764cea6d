//! Checkpoint files: a JSON header followed by little-endian `f32` tensors.
//!
//! Layout: 8-byte magic, `u64` header length, UTF-8 JSON header, the model
//! parameters in [`DenoiserParams::tensors`] order, then (when present) the
//! Adam first and second moments in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::features::FeatureConfig;
use crate::model::{DenoiserConfig, DenoiserModel, DenoiserParams};
use crate::schedule::{NoiseSchedule, ALPHA_END, ALPHA_START};
use crate::trainer::{Adam, Scheme, TrainConfig};

const MAGIC: &[u8; 8] = b"DIFFROLL";
pub const FORMAT_VERSION: u32 = 1;

/// Linear schedule description plus its audit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Text table of `t, alpha_t, alpha_bar_t, sigma_t`.
    pub table: String,
}

impl ScheduleInfo {
    pub fn of(schedule: &NoiseSchedule) -> Self {
        Self {
            steps: schedule.steps(),
            alpha_start: ALPHA_START,
            alpha_end: ALPHA_END,
            table: schedule.to_table(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps)
    }
}

/// How the weights were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    pub dropout_p: f64,
    pub scheme: Scheme,
    pub discriminative: bool,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything in a checkpoint except the tensor data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleInfo,
    pub features: FeatureConfig,
    pub provenance: Provenance,
    pub tensors: Vec<TensorInfo>,
    pub num_parameters: usize,
    pub has_optimizer: bool,
    /// Adam step counter when `has_optimizer`.
    #[serde(default)]
    pub optimizer_step: u64,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DenoiserModel<f32>,
    /// Adam moments `(m, v)` when saved.
    pub optimizer: Option<(DenoiserParams<f32>, DenoiserParams<f32>)>,
}

impl Checkpoint {
    /// The schedule the model was trained with.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header.schedule.schedule()
    }

    /// Rebuilds the optimizer state for resuming.
    pub fn adam(&self, config: &TrainConfig) -> Option<Adam> {
        self.optimizer.as_ref().map(|(m, v)| Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: self.header.optimizer_step,
            m: m.clone(),
            v: v.clone(),
        })
    }

    /// Errors unless `features` and `steps` equal what the checkpoint was
    /// trained with.
    pub fn check_compatible(&self, features: &FeatureConfig, steps: usize) -> Result<()> {
        if &self.header.features != features {
            return Err(Error::ConfigMismatch(format!(
                "feature settings differ from the checkpoint: checkpoint {}, requested {}",
                serde_json::to_string(&self.header.features)?,
                serde_json::to_string(features)?
            )));
        }
        if self.header.schedule.steps != steps {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with T = {}, requested T = {steps}",
                self.header.schedule.steps
            )));
        }
        Ok(())
    }
}

fn write_params(out: &mut Vec<u8>, params: &DenoiserParams<f32>) {
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_params(bytes: &[u8], config: &DenoiserConfig) -> Result<DenoiserParams<f32>> {
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = DenoiserParams::zeros(config);
    params.load_flat(&values)?;
    Ok(params)
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    features: &FeatureConfig,
    provenance: Provenance,
    optimizer: Option<&Adam>,
) -> Result<Vec<u8>> {
    let tensors = model
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorInfo {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        schedule: ScheduleInfo::of(schedule),
        features: features.clone(),
        provenance,
        tensors,
        num_parameters: model.num_parameters(),
        has_optimizer: optimizer.is_some(),
        optimizer_step: optimizer.map_or(0, |a| a.step),
    };
    let json = serde_json::to_vec(&header)?;
    let n = model.num_parameters();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * n * if optimizer.is_some() { 3 } else { 1 });
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_params(&mut out, &model.params);
    if let Some(adam) = optimizer {
        write_params(&mut out, &adam.m);
        write_params(&mut out, &adam.v);
    }
    Ok(out)
}

/// Writes a checkpoint file.
pub fn save(
    path: &Path,
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    features: &FeatureConfig,
    provenance: Provenance,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let bytes = to_bytes(model, schedule, features, provenance, optimizer)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    ensure!(
        bytes.len() >= 16 && &bytes[..8] == MAGIC,
        Checkpoint,
        "not a checkpoint file (bad magic)"
    );
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 16 + len, Checkpoint, "truncated checkpoint header");
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    ensure!(
        header.format_version == FORMAT_VERSION,
        Checkpoint,
        "unsupported checkpoint version {}",
        header.format_version
    );
    Ok((header, 16 + len))
}

/// Parses a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = parse_header(bytes)?;
    header.model.validate()?;
    let n = header.num_parameters;
    let blocks = if header.has_optimizer { 3 } else { 1 };
    ensure!(
        bytes.len() == start + 4 * n * blocks,
        Checkpoint,
        "checkpoint holds {} data bytes, expected {}",
        bytes.len() - start,
        4 * n * blocks
    );
    let block = |k: usize| read_params(&bytes[start + 4 * n * k..start + 4 * n * (k + 1)], &header.model);
    let params = block(0)?;
    let model = DenoiserModel::from_params(header.model.clone(), params)?;
    ensure!(
        model.num_parameters() == n,
        Checkpoint,
        "parameter count {} does not match the configuration ({})",
        n,
        model.num_parameters()
    );
    let optimizer = if header.has_optimizer {
        Some((block(1)?, block(2)?))
    } else {
        None
    };
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

/// Loads a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    ensure!(&head[..8] == MAGIC, Checkpoint, "{}: bad magic", path.display());
    let mut buf = head.to_vec();
    buf.resize(16 + len, 0);
    f.read_exact(&mut buf[16..]).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&buf)?.0)
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MelConditioner;
    use crate::sampler::{sample, SamplerConfig};
    use crate::trainer::TrainingExample;
    use ndarray::Array2;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            residual_channels: 8,
            num_layers: 2,
            kernel_size: 3,
            dilation_pattern: vec![1],
            mel_bins: 229,
            roll_channels: 88,
            time_embedding_dim: 8,
            diffusion_steps: 10,
        }
    }

    fn provenance() -> Provenance {
        Provenance {
            step: 3,
            seed: 1,
            dropout_p: 0.1,
            scheme: Scheme::Supervised,
            discriminative: false,
            train_config: None,
        }
    }

    #[test]
    fn save_load_reproduces_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = DenoiserModel::<f32>::init(tiny(), 4).unwrap();
        let schedule = NoiseSchedule::linear(10).unwrap();
        let features = FeatureConfig::default();
        save(&path, &model, &schedule, &features, provenance(), None).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.schedule().unwrap(), schedule);
        assert_eq!(read_header(&path).unwrap(), ck.header);

        let cond = MelConditioner::new(Array2::from_elem((229, 12), 0.3)).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            seed: 8,
            ..Default::default()
        };
        let a = sample(&model, &cond, &cfg, &schedule, 31.25).unwrap();
        let b = sample(&ck.model, &cond, &cfg, &ck.schedule().unwrap(), 31.25).unwrap();
        assert_eq!(a.raw, b.raw);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let model = DenoiserModel::<f32>::init(tiny(), 4).unwrap();
        let cfg = TrainConfig {
            diffusion_steps: 10,
            batch_size: 1,
            ..Default::default()
        };
        let mut trainer = crate::trainer::Trainer::new(model, cfg.clone()).unwrap();
        let ex = TrainingExample::paired(Array2::zeros((88, 6)), Array2::from_elem((229, 6), 0.5)).unwrap();
        trainer.run(std::slice::from_ref(&ex), &[], 2, |_| {}).unwrap();
        let bytes = to_bytes(
            &trainer.model,
            &trainer.schedule,
            &FeatureConfig::default(),
            provenance(),
            Some(&trainer.optimizer),
        )
        .unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.adam(&cfg).unwrap(), trainer.optimizer);
    }

    #[test]
    fn mismatches_and_corruption() {
        let model = DenoiserModel::<f32>::init(tiny(), 4).unwrap();
        let schedule = NoiseSchedule::linear(10).unwrap();
        let features = FeatureConfig::default();
        let bytes = to_bytes(&model, &schedule, &features, provenance(), None).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert!(ck.check_compatible(&features, 10).is_ok());
        let other = FeatureConfig {
            n_mels: 128,
            ..features.clone()
        };
        assert!(matches!(ck.check_compatible(&other, 10), Err(Error::ConfigMismatch(_))));
        assert!(matches!(ck.check_compatible(&features, 200), Err(Error::ConfigMismatch(_))));

        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"NOTACKPT........"), Err(Error::Checkpoint(_))));
    }
}
