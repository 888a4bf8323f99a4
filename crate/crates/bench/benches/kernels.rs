use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nzk_core::directions::{DirectionSpec, SampleMode};
use nzk_core::dynamics::{closed_form_trajectory, spectral};
use nzk_core::experiments::{teacher_task, unit_circle};
use nzk_core::kernels::{expected_nzk_closed, expected_nzk_mc};
use nzk_core::models::{Activation, LinearModel, Mlp, Model};
use nzk_core::rng::{stream2, Purpose};
use nzk_core::zo::{train, zo_gradient, Loss, TrainConfig, TrainMode};
use std::hint::black_box;

fn kernel_mc(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_mc");
    let x = unit_circle(8);
    let model = LinearModel::zeros(2);
    let spec = DirectionSpec::standard_gaussian(2);
    for samples in [1_000usize, 10_000] {
        g.bench_with_input(BenchmarkId::from_parameter(samples), &samples, |b, &m| {
            b.iter(|| expected_nzk_mc(&model, model.params(), 1e-3, &spec, &spec, SampleMode::Independent, m, &x, 0).unwrap())
        });
    }
    g.finish();
    c.bench_function("kernel_closed/n8", |b| b.iter(|| expected_nzk_closed(&spec, &spec, black_box(&x)).unwrap()));
}

fn gradients(c: &mut Criterion) {
    let data = teacher_task(64, 32, 0.02, 1).unwrap();
    let mlp = Mlp::random(vec![64, 10, 5, 1], Activation::Relu, true, 0).unwrap();
    let d = mlp.param_count();
    let z = DirectionSpec::standard_gaussian(d).sample(&mut stream2(0, Purpose::DirectionZ, 0, 0)).unwrap();
    let theta = mlp.params().to_vec();
    c.bench_function("zo_gradient/mlp_n32", |b| {
        b.iter(|| zo_gradient(&mlp, &data, black_box(&theta), 1e-3, &z, Loss::Squared).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let data = teacher_task(2, 8, 0.02, 2024).unwrap();
    let model = LinearModel::zeros(2);
    let mut g = c.benchmark_group("train_1000_steps");
    for mode in [TrainMode::Fo, TrainMode::ZoParametric, TrainMode::ZoKernel] {
        let cfg = TrainConfig {
            mode,
            sample_mode: if mode == TrainMode::ZoKernel { SampleMode::Shared } else { SampleMode::Independent },
            direction_z: DirectionSpec::standard_gaussian(2),
            direction_zeta: DirectionSpec::standard_gaussian(2),
            ..TrainConfig::default()
        };
        g.bench_function(mode.name(), |b| b.iter(|| train(&model, &data, &cfg).unwrap()));
    }
    g.finish();
}

fn dynamics(c: &mut Criterion) {
    let mut g = c.benchmark_group("dynamics");
    for n in [8usize, 64, 200] {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 1.0]).collect();
        let k = nzk_core::kernels::ntk_linear(&x).unwrap().values / n as f64;
        let f0 = vec![0.0; n];
        let target: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        g.bench_with_input(BenchmarkId::new("spectral", n), &k, |b, k| b.iter(|| spectral(k).unwrap()));
        g.bench_with_input(BenchmarkId::new("closed_form_500", n), &k, |b, k| {
            b.iter(|| closed_form_trajectory(k, &f0, &target, 1e-2, 500).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernel_mc, gradients, training, dynamics);
criterion_main!(benches);
