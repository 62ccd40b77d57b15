use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eapsort_core::clustering::{ap_iterate, similarity, MessageState};
use eapsort_core::electrode::{CellModel, FRESH_EAPS};
use eapsort_core::estimator::{estimate, exact_feature_points, EapBounds, PsoGaOptions};
use eapsort_core::nsga2::non_dominated_sort;
use eapsort_core::pipeline::{regression_dataset, slice_window, synth_cohort, CohortSpec};
use eapsort_core::regressor::{build_network, train, CnnConfig, Dataset, TrainOptions};
use eapsort_core::signal::savgol_smooth;

fn bench_estimate(c: &mut Criterion) {
    let cell = CellModel::reference();
    let dq = exact_feature_points(&cell, &FRESH_EAPS).unwrap().dq_fp;
    let mut g = c.benchmark_group("estimator");
    g.sample_size(10);
    g.bench_function("estimate_default_options", |b| {
        b.iter(|| estimate(&cell, black_box(&dq), &EapBounds::default(), &PsoGaOptions::default()).unwrap())
    });
    g.finish();
}

fn bench_ap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Vec<f64>> = (0..150).map(|_| (0..3).map(|_| rng.random::<f64>() * 100.0).collect()).collect();
    let s = similarity(&data).unwrap();
    let state = MessageState::new(150, 0.5);
    c.bench_function("ap_iterate_n150", |b| b.iter(|| ap_iterate(black_box(&state), &s).unwrap()));
}

fn bench_cnn(c: &mut Criterion) {
    let config = CnnConfig::default();
    let net = build_network(&config, 0).unwrap();
    let x: Vec<f64> = (0..config.input_len()).map(|i| (i as f64 * 0.05).sin()).collect();
    c.bench_function("cnn_forward_default", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));

    let cohort = synth_cohort(&CellModel::reference(), &CohortSpec { n_cells: 32, ..CohortSpec::default() }).unwrap();
    let full = regression_dataset(&cohort).unwrap();
    let data =
        Dataset { inputs: full.inputs.iter().map(|x| slice_window(x, &config)).collect(), targets: full.targets };
    let opts = TrainOptions { max_epochs: 1, val_fraction: 0.0, batch_size: 32, ..TrainOptions::default() };
    let mut g = c.benchmark_group("cnn_train");
    g.sample_size(10);
    g.bench_function("one_epoch_32_samples", |b| {
        b.iter_batched(|| net.clone(), |n| train(n, &data, &opts).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

fn bench_sort(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let objs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random(), rng.random()]).collect();
    c.bench_function("non_dominated_sort_200x2", |b| b.iter(|| non_dominated_sort(black_box(&objs))));
}

fn bench_savgol(c: &mut Criterion) {
    let series: Vec<f64> = (0..501).map(|i| (i as f64 * 0.02).sin()).collect();
    c.bench_function("savgol_501_w21_o3", |b| b.iter(|| savgol_smooth(black_box(&series), 21, 3).unwrap()));
}

criterion_group!(benches, bench_estimate, bench_ap, bench_cnn, bench_sort, bench_savgol);
criterion_main!(benches);
