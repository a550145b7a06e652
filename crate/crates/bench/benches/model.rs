use criterion::{criterion_group, criterion_main, Criterion};
use left_bench::sine_window;
use left_core::{LeftModel, ModelConfig, TrainConfig, Trainer};
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let channels = 8;
    let model = LeftModel::new(ModelConfig::new(96, channels), 1).unwrap();
    let x = sine_window(96, channels);
    c.bench_function("model infer (96 x 8)", |b| b.iter(|| model.infer(black_box(&x), 0.5).unwrap()));

    let trainer = Trainer::new(model, TrainConfig::default(), 100).unwrap();
    let batch: Vec<_> = (0..4).map(|i| sine_window(96 + i, channels).slice_move(ndarray::s![i..i + 96, ..])).collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("loss and gradients, batch 4", |b| b.iter(|| trainer.loss_and_gradients(black_box(&batch)).unwrap()));
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
