use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffroll::evaluation::match_notes;
use diffroll::exec::Execution;
use diffroll::model::{DenoiserConfig, DenoiserModel};
use diffroll::pianoroll::NoteEvent;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Execution::Parallel));
    v
}

fn bench_config() -> DenoiserConfig {
    DenoiserConfig {
        residual_channels: 64,
        num_layers: 6,
        ..Default::default()
    }
}

fn inputs(batch: usize, frames: usize) -> (Array3<f32>, Vec<usize>, Array3<f32>, Array3<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array3::from_shape_simple_fn((batch, 88, frames), || rng.gen_range(-1.0..1.0));
    let t = (0..batch).map(|i| 1 + i * 20).collect();
    let c = Array3::from_shape_simple_fn((batch, 229, frames), || rng.gen_range(0.0..1.0));
    let target = Array3::from_shape_simple_fn((batch, 88, frames), || rng.gen_bool(0.05) as u8 as f32);
    (x, t, c, target)
}

fn forward(c: &mut Criterion) {
    let model = DenoiserModel::<f32>::init(bench_config(), 0).unwrap();
    let (x, t, cond, _) = inputs(8, 160);
    let mut group = c.benchmark_group("forward_b8_f160");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.predict_x0_with(exec, x.view(), &t, cond.view()).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let model = DenoiserModel::<f32>::init(bench_config(), 0).unwrap();
    let (x, t, cond, target) = inputs(8, 160);
    let mut group = c.benchmark_group("loss_and_grad_b8_f160");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                model
                    .loss_and_grad(exec, x.view(), &t, cond.view(), target.view())
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn corpus(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut random_notes = |n: usize| -> Vec<NoteEvent> {
        (0..n)
            .map(|_| {
                let on = rng.gen_range(0.0..600.0);
                NoteEvent::new(rng.gen_range(21..=108), on, on + 0.3).unwrap()
            })
            .collect()
    };
    let files: Vec<(Vec<NoteEvent>, Vec<NoteEvent>)> = (0..64).map(|_| (random_notes(3000), random_notes(3000))).collect();
    let mut group = c.benchmark_group("match_notes_64_files");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(files.len(), |i| match_notes(&files[i].0, &files[i].1, 0.05).unwrap().f1))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradients, corpus);
criterion_main!(benches);
