//! Overfits the default model on synthetic segments and reports note F1.
//!
//! Settings come from environment variables: `ITERS`, `BATCH`, `CROP`,
//! `LR`, `ITEMS`, `CHANNELS`, `LAYERS`, `EVAL_EVERY`, `SAMPLE_STEPS`,
//! `DISCRIMINATIVE`.

use std::time::Instant;

use diffroll::dataset::{toy_item, ToyConfig};
use diffroll::evaluation::match_notes;
use diffroll::features::{FeatureConfig, MelExtractor};
use diffroll::model::{DenoiserConfig, DenoiserModel};
use diffroll::pianoroll::{notes_to_roll, roll_to_notes};
use diffroll::sampler::{sample, transcribe_direct, SamplerConfig};
use diffroll::schedule::{NoiseSchedule, SigmaMode};
use diffroll::trainer::{TrainConfig, Trainer, TrainingExample};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> diffroll::Result<()> {
    let iters: usize = env("ITERS", 200);
    let items: u64 = env("ITEMS", 1);
    let eval_every: usize = env("EVAL_EVERY", 50);
    let discriminative: bool = env("DISCRIMINATIVE", false);
    let sample_steps: usize = env("SAMPLE_STEPS", 200);
    let model_cfg = DenoiserConfig {
        residual_channels: env("CHANNELS", 512),
        num_layers: env("LAYERS", 15),
        ..Default::default()
    };
    let extractor = MelExtractor::new(FeatureConfig::default())?;
    let toy = ToyConfig::default();
    let mut data = Vec::new();
    let mut conds = Vec::new();
    let mut refs = Vec::new();
    for i in 0..items {
        let item = toy_item(&toy, 0, i)?;
        let cond = extractor.conditioner(&item.audio)?;
        let (roll, _) = notes_to_roll(&item.notes, 31.25, cond.num_frames())?;
        refs.push(item.notes.clone());
        data.push(TrainingExample::paired(roll.into_data(), cond.data().clone())?);
        conds.push(cond);
    }
    let train_cfg = TrainConfig {
        batch_size: env("BATCH", 4),
        crop_frames: Some(env("CROP", 160)),
        learning_rate: env("LR", 3e-4),
        discriminative,
        iterations: iters,
        ..Default::default()
    };
    let model = DenoiserModel::<f32>::init(model_cfg, 0)?;
    println!("parameters: {}", model.num_parameters());
    let mut trainer = Trainer::new(model, train_cfg)?;
    let start = Instant::now();
    let schedule = NoiseSchedule::linear(200)?;
    for chunk in 0..iters.div_ceil(eval_every) {
        let n = eval_every.min(iters - chunk * eval_every);
        let recs = trainer.run(&data, &[], n, |_| {})?;
        let mean = recs.iter().map(|r| r.loss).sum::<f32>() / recs.len() as f32;
        println!(
            "step {} loss {:.5} elapsed {:.0}s",
            trainer.step(),
            mean,
            start.elapsed().as_secs_f64()
        );
    }
    let t0 = Instant::now();
    for (i, cond) in conds.iter().enumerate() {
        for w in [0.5, 0.0] {
            let out = if discriminative {
                transcribe_direct(&trainer.model, cond, 0.5, 31.25)?
            } else {
                let cfg = SamplerConfig {
                    w,
                    steps: sample_steps,
                    sigma_mode: SigmaMode::Ddpm,
                    ..Default::default()
                };
                sample(&trainer.model, cond, &cfg, &schedule, 31.25)?
            };
            let notes = roll_to_notes(&out.roll)?;
            let m = match_notes(&notes, &refs[i], 0.05)?;
            println!(
                "item {i} w {w}: F1 {:.4} P {:.4} R {:.4} ({} pred, {} ref) sample {:.0}s",
                m.f1,
                m.precision,
                m.recall,
                m.num_pred,
                m.num_ref,
                t0.elapsed().as_secs_f64()
            );
            if discriminative {
                break;
            }
        }
    }
    Ok(())
}
