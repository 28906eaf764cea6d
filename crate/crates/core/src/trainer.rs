//! Training: conditioner dropout, the L2 loss on `x0`, Adam, and the
//! supervised, unpaired-pretraining and mixed (`p = 0 + 1`) schemes.
//!
//! Every optimizer step draws from its own ChaCha stream derived from
//! `(seed, step)`, so a run resumed from a checkpoint replays the exact same
//! batches. Draw order within a step: example choice, crop offsets,
//! conditioner dropout, diffusion steps, Gaussian noise.

use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::model::{DenoiserModel, DenoiserParams};
use crate::schedule::{NoiseSchedule, DEFAULT_STEPS};
use crate::{MASK_VALUE, NUM_PITCHES};

/// Which data feeds each step and how conditioners are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Paired data with dropout probability `p`.
    #[default]
    Supervised,
    /// Rolls only, every conditioner masked.
    UnpairedPretrain,
    /// Paired batches with `p = 0` interleaved with unpaired batches with `p = 1`.
    MixedP0Plus1,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Scheme::Supervised),
            "unpaired-pretrain" | "unpaired_pretrain" | "pretrain" => Ok(Scheme::UnpairedPretrain),
            "p0-plus-1" | "mixed_p0_plus_1" | "mixed" => Ok(Scheme::MixedP0Plus1),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme {other:?}, expected supervised, unpaired-pretrain or p0-plus-1"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Supervised => "supervised",
            Scheme::UnpairedPretrain => "unpaired-pretrain",
            Scheme::MixedP0Plus1 => "p0-plus-1",
        })
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dropout_p: f64,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Optimizer steps to run.
    pub iterations: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Probability that a mixed-scheme step draws from the paired set.
    pub paired_fraction: f64,
    /// Train on random windows of this many frames when set.
    pub crop_frames: Option<usize>,
    /// Fix `x_t = 0` and `t = 1`: the discriminative baseline.
    pub discriminative: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dropout_p: 0.1,
            diffusion_steps: DEFAULT_STEPS,
            batch_size: 16,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            scheme: Scheme::Supervised,
            paired_fraction: 0.5,
            crop_frames: None,
            discriminative: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.dropout_p),
            InvalidArgument,
            "dropout p must lie in [0, 1], got {}",
            self.dropout_p
        );
        ensure!(
            (0.0..=1.0).contains(&self.paired_fraction),
            InvalidArgument,
            "paired fraction must lie in [0, 1], got {}",
            self.paired_fraction
        );
        ensure!(self.batch_size > 0, InvalidArgument, "batch size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning rate must be positive"
        );
        ensure!(self.crop_frames != Some(0), InvalidArgument, "crop length must be positive");
        Ok(())
    }
}

/// One training item: an `88 x frames` roll and, when paired, its
/// `mel_bins x frames` conditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub roll: Array2<f32>,
    pub mel: Option<Array2<f32>>,
}

impl TrainingExample {
    pub fn paired(roll: Array2<f32>, mel: Array2<f32>) -> Result<Self> {
        ensure!(
            roll.nrows() == NUM_PITCHES,
            Shape,
            "roll has {} rows",
            roll.nrows()
        );
        ensure!(
            roll.ncols() == mel.ncols(),
            Shape,
            "roll has {} frames but conditioner has {}",
            roll.ncols(),
            mel.ncols()
        );
        Ok(Self {
            roll,
            mel: Some(mel),
        })
    }

    pub fn rolls_only(roll: Array2<f32>) -> Result<Self> {
        ensure!(
            roll.nrows() == NUM_PITCHES,
            Shape,
            "roll has {} rows",
            roll.nrows()
        );
        Ok(Self { roll, mel: None })
    }

    pub fn num_frames(&self) -> usize {
        self.roll.ncols()
    }
}

/// Replaces each batch element's conditioner by the mask value with
/// probability `p`. Returns which elements were masked.
pub fn cfg_dropout<R: Rng>(conds: &mut Array3<f32>, p: f64, rng: &mut R) -> Vec<bool> {
    conds
        .outer_iter_mut()
        .map(|mut c| {
            let drop = rng.gen::<f64>() < p;
            if drop {
                c.fill(MASK_VALUE);
            }
            drop
        })
        .collect()
}

/// Mean squared error over all entries.
pub fn mse_loss(prediction: ArrayView3<'_, f32>, target: ArrayView3<'_, f32>) -> Result<f32> {
    ensure!(
        prediction.dim() == target.dim(),
        Shape,
        "prediction {:?} and target {:?} differ",
        prediction.dim(),
        target.dim()
    );
    let n = target.len().max(1) as f64;
    let sum = Zip::from(&prediction)
        .and(&target)
        .fold(0.0f64, |acc, &p, &t| acc + ((p - t) as f64).powi(2));
    Ok((sum / n) as f32)
}

/// A batch ready for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x_t: Array3<f32>,
    pub t: Vec<usize>,
    pub conds: Array3<f32>,
    pub target: Array3<f32>,
    pub masked: Vec<bool>,
}

/// Builds `(x_t, t, c)` for clean rolls and conditioners (already cropped).
pub fn prepare_batch<R: Rng>(
    rolls: Array3<f32>,
    mut conds: Array3<f32>,
    dropout_p: f64,
    schedule: &NoiseSchedule,
    discriminative: bool,
    rng: &mut R,
) -> Result<PreparedBatch> {
    ensure!(
        rolls.dim().0 == conds.dim().0 && rolls.dim().2 == conds.dim().2,
        Shape,
        "rolls {:?} and conditioners {:?} are not aligned",
        rolls.dim(),
        conds.dim()
    );
    let b = rolls.dim().0;
    let masked = cfg_dropout(&mut conds, dropout_p, rng);
    let (t, x_t) = if discriminative {
        (vec![1; b], Array3::zeros(rolls.dim()))
    } else {
        let t: Vec<usize> = (0..b)
            .map(|_| rng.gen_range(1..=schedule.steps()))
            .collect();
        let eps: Array3<f32> = Array3::from_shape_simple_fn(rolls.dim(), || StandardNormal.sample(rng));
        let mut x_t = Array3::zeros(rolls.dim());
        for i in 0..b {
            let xi = schedule.forward_diffuse(
                rolls.index_axis(Axis(0), i),
                t[i],
                eps.index_axis(Axis(0), i),
            )?;
            x_t.index_axis_mut(Axis(0), i).assign(&xi);
        }
        (t, x_t)
    };
    Ok(PreparedBatch {
        x_t,
        t,
        conds,
        target: rolls,
        masked,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: DenoiserParams<f32>,
    pub v: DenoiserParams<f32>,
}

impl Adam {
    pub fn new(model: &DenoiserModel<f32>, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: DenoiserParams::zeros(model.config()),
            v: DenoiserParams::zeros(model.config()),
        }
    }

    pub fn update(&mut self, params: &mut DenoiserParams<f32>, grads: &DenoiserParams<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((mut p, (_, g)), mut m), mut v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Where a step's batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSource {
    Paired,
    Unpaired,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub p: f64,
    pub scheme: Scheme,
    pub source: BatchSource,
    pub masked: usize,
}

/// Model, optimizer and schedule under one training configuration.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DenoiserModel<f32>,
    pub optimizer: Adam,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub exec: Execution,
}

fn step_rng(seed: u64, step: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(2).wrapping_add(lane));
    rng
}

impl Trainer {
    pub fn new(model: DenoiserModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().diffusion_steps != config.diffusion_steps {
            return Err(Error::ConfigMismatch(format!(
                "model accepts steps up to {}, training uses T = {}",
                model.config().diffusion_steps,
                config.diffusion_steps
            )));
        }
        let schedule = NoiseSchedule::linear(config.diffusion_steps)?;
        let optimizer = Adam::new(&model, &config);
        Ok(Self {
            model,
            optimizer,
            schedule,
            config,
            exec: Execution::default(),
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    fn check_dataset(&self, data: &[TrainingExample], paired: bool) -> Result<()> {
        let mel_bins = self.model.config().mel_bins;
        for ex in data {
            ensure!(ex.num_frames() > 0, InvalidArgument, "empty training example");
            if paired {
                let mel = ex.mel.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("paired dataset contains an example without audio".into())
                })?;
                ensure!(
                    mel.dim() == (mel_bins, ex.num_frames()),
                    Shape,
                    "conditioner {:?} does not match ({mel_bins}, {})",
                    mel.dim(),
                    ex.num_frames()
                );
            }
        }
        Ok(())
    }

    /// Collects `batch_size` random examples (cropped to a common length).
    fn gather(
        &self,
        data: &[TrainingExample],
        rng: &mut ChaCha8Rng,
    ) -> (Array3<f32>, Array3<f32>) {
        let b = self.config.batch_size;
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let shortest = picks.iter().map(|&i| data[i].num_frames()).min().unwrap();
        let frames = self.config.crop_frames.map_or(shortest, |c| c.min(shortest));
        let mel_bins = self.model.config().mel_bins;
        let mut rolls = Array3::zeros((b, NUM_PITCHES, frames));
        let mut conds = Array3::from_elem((b, mel_bins, frames), MASK_VALUE);
        for (k, &i) in picks.iter().enumerate() {
            let ex = &data[i];
            let start = if ex.num_frames() > frames {
                rng.gen_range(0..=ex.num_frames() - frames)
            } else {
                0
            };
            let window = s![.., start..start + frames];
            rolls.index_axis_mut(Axis(0), k).assign(&ex.roll.slice(window));
            if let Some(mel) = &ex.mel {
                conds.index_axis_mut(Axis(0), k).assign(&mel.slice(window));
            }
        }
        (rolls, conds)
    }

    /// Loss of a prepared batch and one optimizer update.
    pub fn training_step(&mut self, batch: &PreparedBatch) -> Result<f32> {
        let (loss, grads) = self.model.loss_and_grad(
            self.exec,
            batch.x_t.view(),
            &batch.t,
            batch.conds.view(),
            batch.target.view(),
        )?;
        self.optimizer.update(&mut self.model.params, &grads);
        Ok(loss)
    }

    /// Builds the batch for the next step without touching the model.
    pub fn next_batch(
        &self,
        paired: &[TrainingExample],
        unpaired: &[TrainingExample],
    ) -> Result<(PreparedBatch, BatchSource, f64)> {
        let step = self.optimizer.step;
        let mut rng = step_rng(self.config.seed, step, 0);
        let (source, p) = match self.config.scheme {
            Scheme::Supervised => (BatchSource::Paired, self.config.dropout_p),
            Scheme::UnpairedPretrain => (BatchSource::Unpaired, 1.0),
            Scheme::MixedP0Plus1 => {
                let mut pick = step_rng(self.config.seed, step, 1);
                if pick.gen::<f64>() < self.config.paired_fraction {
                    (BatchSource::Paired, 0.0)
                } else {
                    (BatchSource::Unpaired, 1.0)
                }
            }
        };
        let data = match source {
            BatchSource::Paired => paired,
            BatchSource::Unpaired => unpaired,
        };
        ensure!(!data.is_empty(), InvalidArgument, "{source:?} dataset is empty");
        let (rolls, conds) = self.gather(data, &mut rng);
        let batch = prepare_batch(
            rolls,
            conds,
            p,
            &self.schedule,
            self.config.discriminative,
            &mut rng,
        )?;
        Ok((batch, source, p))
    }

    /// Runs `iterations` steps, reporting each to `log`.
    pub fn run(
        &mut self,
        paired: &[TrainingExample],
        unpaired: &[TrainingExample],
        iterations: usize,
        mut log: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        match self.config.scheme {
            Scheme::Supervised => {
                ensure!(!paired.is_empty(), InvalidArgument, "paired dataset is empty");
            }
            Scheme::UnpairedPretrain => {
                ensure!(!unpaired.is_empty(), InvalidArgument, "roll dataset is empty");
            }
            Scheme::MixedP0Plus1 => ensure!(
                !paired.is_empty() && !unpaired.is_empty(),
                InvalidArgument,
                "the p = 0 + 1 scheme needs both a paired and an unpaired dataset"
            ),
        }
        self.check_dataset(paired, true)?;
        self.check_dataset(unpaired, false)?;
        let mut records = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (batch, source, p) = self.next_batch(paired, unpaired)?;
            let loss = self.training_step(&batch)?;
            let record = StepRecord {
                step: self.optimizer.step,
                loss,
                p,
                scheme: self.config.scheme,
                source,
                masked: batch.masked.iter().filter(|&&m| m).count(),
            };
            log(&record);
            records.push(record);
        }
        Ok(records)
    }
}

/// Supervised training with conditioner dropout.
pub fn train_supervised(
    model: DenoiserModel<f32>,
    paired: &[TrainingExample],
    config: TrainConfig,
) -> Result<(DenoiserModel<f32>, Vec<StepRecord>)> {
    let config = TrainConfig {
        scheme: Scheme::Supervised,
        ..config
    };
    let iterations = config.iterations;
    let mut trainer = Trainer::new(model, config)?;
    let records = trainer.run(paired, &[], iterations, |_| {})?;
    Ok((trainer.model, records))
}

/// Trains only the unconditional mode on rolls without audio.
pub fn pretrain_unpaired(
    model: DenoiserModel<f32>,
    rolls: &[TrainingExample],
    config: TrainConfig,
) -> Result<(DenoiserModel<f32>, Vec<StepRecord>)> {
    ensure!(!rolls.is_empty(), InvalidArgument, "roll dataset is empty");
    let config = TrainConfig {
        scheme: Scheme::UnpairedPretrain,
        ..config
    };
    let iterations = config.iterations;
    let mut trainer = Trainer::new(model, config)?;
    let records = trainer.run(&[], rolls, iterations, |_| {})?;
    Ok((trainer.model, records))
}

/// Interleaves paired (`p = 0`) and unpaired (`p = 1`) batches.
pub fn train_mixed_p0_plus_1(
    model: DenoiserModel<f32>,
    paired: &[TrainingExample],
    unpaired: &[TrainingExample],
    config: TrainConfig,
) -> Result<(DenoiserModel<f32>, Vec<StepRecord>)> {
    let config = TrainConfig {
        scheme: Scheme::MixedP0Plus1,
        ..config
    };
    let iterations = config.iterations;
    let mut trainer = Trainer::new(model, config)?;
    let records = trainer.run(paired, unpaired, iterations, |_| {})?;
    Ok((trainer.model, records))
}

/// Crops or pads a conditioner to `frames` columns (padding with silence).
pub fn fit_frames(mel: ArrayView2<'_, f32>, frames: usize) -> Array2<f32> {
    let mut out = Array2::zeros((mel.nrows(), frames));
    let n = frames.min(mel.ncols());
    out.slice_mut(s![.., ..n]).assign(&mel.slice(s![.., ..n]));
    out
}
