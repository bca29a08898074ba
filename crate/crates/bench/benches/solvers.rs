use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use bilip_bench::bench_layer;
use bilip_core::solvers::{dys_invert, fsm_invert, SolverConfig, SolverKind};

fn bench_inversion(c: &mut Criterion) {
    let layer = bench_layer(8, &[32; 4], 0.5, 2.0, 7);
    let x0: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
    let y = layer.forward_vec(&x0).unwrap();

    let mut group = c.benchmark_group("invert");
    group.sample_size(20);
    group.bench_with_input(BenchmarkId::new("dys", "alpha=0.9bound"), &y, |b, y| {
        let cfg = SolverConfig::default();
        b.iter(|| dys_invert(black_box(&layer), black_box(y), &cfg).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("fsm", "alpha=mu/nu2"), &y, |b, y| {
        let cfg = SolverConfig {
            kind: SolverKind::Fsm,
            ..SolverConfig::default()
        };
        b.iter(|| fsm_invert(black_box(&layer), black_box(y), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_inversion);
criterion_main!(benches);
