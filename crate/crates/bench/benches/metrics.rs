use criterion::{criterion_group, criterion_main, Criterion};

use scenflow::metrics::{dtw, evaluate, frechet_distance, mmd2, MetricConfig};
use scenflow::objective::mgda_alpha;
use scenflow_bench::pv_series;

fn metrics(c: &mut Criterion) {
    let real = pv_series(100, 64, 0);
    let gen = pv_series(100, 64, 1);
    let cfg = MetricConfig::default();
    c.bench_function("dtw 64x64", |b| b.iter(|| dtw(&real[0], &gen[0]).unwrap()));
    c.bench_function("mmd2 100v100", |b| {
        b.iter(|| mmd2(&real, &gen, &cfg).unwrap())
    });
    c.bench_function("fd 100v100", |b| {
        b.iter(|| frechet_distance(&real, &gen).unwrap())
    });
    c.bench_function("evaluate 100v100", |b| {
        b.iter(|| evaluate(&real, &gen, &cfg).unwrap())
    });
}

fn mgda(c: &mut Criterion) {
    let p = 400_000;
    let g_t: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
    let g_f: Vec<f64> = (0..p).map(|i| (i as f64 * 0.11).cos()).collect();
    c.bench_function("mgda alpha 400k", |b| {
        b.iter(|| mgda_alpha(&g_t, &g_f).unwrap())
    });
}

criterion_group!(benches, metrics, mgda);
criterion_main!(benches);
