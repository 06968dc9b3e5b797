//! One training step and one sliding-window inference, on the full rayon
//! pool and on a single worker. Build with `--no-default-features` to time
//! the sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maemi_core::anomaly::{sliding_window_infer, InferenceConfig};
use maemi_core::mae3d::{optimizer_for, prepare_sample, train_step, MaeConfig, MaeModel, TrainConfig};
use maemi_core::par;
use maemi_core::phantom::{case_config, generate_case, PhantomConfig};

fn pools() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn bench(c: &mut Criterion) {
    let pc = PhantomConfig::default();
    let case = generate_case(&case_config(&pc, 2, 0), false).unwrap();
    let model = MaeModel::new(MaeConfig::desk(), 0).unwrap();
    let tc = TrainConfig::default();
    let batch: Vec<_> = (0..tc.batch_size)
        .map(|i| prepare_sample(&model, &case.image, &tc, 0, i).unwrap())
        .collect();
    let ic = InferenceConfig::desk();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for t in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter_batched(
                || (model.clone(), optimizer_for(&model, &tc)),
                |(mut m, mut opt)| par::with_threads(t, || train_step(&mut m, &mut opt, &batch, 1e-3).unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();

    let mut g = c.benchmark_group("sliding_window_infer");
    g.sample_size(10);
    for t in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || sliding_window_infer(&model, &case.image, &ic).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
