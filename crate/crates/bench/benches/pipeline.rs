use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use vseg_bench::scene;
use vseg_core::affinity::second_eigenvector;
use vseg_core::flowops::{apply_warp, build_warp};
use vseg_core::objective::optimize;
use vseg_core::pipeline::{build_warps, compute_reliability, frame_affinity_at, initialize, optimization_grid};
use vseg_core::PipelineConfig;

fn affinity(c: &mut Criterion) {
    let mut group = c.benchmark_group("frame_affinity");
    group.sample_size(10);
    let cfg = PipelineConfig::default();
    for (h, w) in [(30, 54), (60, 107)] {
        let bundle = scene(h, w, 2, 64);
        let rel = compute_reliability(&bundle, cfg.percentile_k).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{h}x{w}")), &bundle, |b, bundle| {
            b.iter(|| frame_affinity_at(bundle, &rel, 0, &cfg.affinity).unwrap())
        });
    }
    group.finish();
}

fn power_iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("second_eigenvector");
    group.sample_size(10);
    let cfg = PipelineConfig::default();
    for (h, w) in [(30, 54), (60, 107)] {
        let bundle = scene(h, w, 2, 64);
        let rel = compute_reliability(&bundle, cfg.percentile_k).unwrap();
        let a = frame_affinity_at(&bundle, &rel, 0, &cfg.affinity).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{h}x{w}")), &a, |b, a| {
            b.iter(|| second_eigenvector(a, &cfg.affinity).unwrap())
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let bundle = scene(60, 107, 2, 16);
    let op = build_warp(&bundle.flow_fwd[0]).unwrap();
    let mask: Vec<f64> = (0..op.grid().len()).map(|i| (i % 7) as f64 / 7.0).collect();
    c.bench_function("apply_warp/60x107", |b| {
        b.iter(|| apply_warp(&op, black_box(&mask)).unwrap())
    });
}

fn refine(c: &mut Criterion) {
    let mut group = c.benchmark_group("optimize");
    group.sample_size(10);
    let cfg = PipelineConfig::default();
    for (h, w, n) in [(12, 12, 5), (60, 107, 3)] {
        let bundle = scene(h, w, n, 16);
        let rel = compute_reliability(&bundle, cfg.percentile_k).unwrap();
        let grid = optimization_grid(&bundle, cfg.resolution);
        let init = initialize(&bundle, &rel, &cfg, grid).unwrap();
        let warps = build_warps(&bundle, &rel, cfg.objective.horizon_t, grid).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{h}x{w}x{n}")), |b| {
            b.iter(|| optimize(&init.masks, &warps, &cfg.objective).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, affinity, power_iteration, warp, refine);
criterion_main!(benches);
