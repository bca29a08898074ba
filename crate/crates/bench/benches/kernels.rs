use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bilip_bench::bench_layer;
use bilip_core::cayley::{cayley_transform, normal_matrix, CayleyInput};
use bilip_core::monlip::{certificate_check, materialize, FreeParams};
use bilip_core::Activation;

fn bench_cayley(c: &mut Criterion) {
    let mut group = c.benchmark_group("cayley_transform");
    for &(n, p) in &[(64usize, 32usize), (256, 64), (512, 128)] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = normal_matrix(p, p, 0.1, &mut rng);
        let h = normal_matrix(n - p, p, 0.1, &mut rng);
        let input = CayleyInput::new(g, Some(h)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{p}")), &input, |b, input| {
            b.iter(|| cayley_transform(black_box(input)).unwrap())
        });
    }
    group.finish();
}

fn bench_materialize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params =
        FreeParams::init(8, &[64; 4], 0.5, 2.0, Activation::Relu, false, &mut rng).unwrap();
    c.bench_function("materialize_4x64", |b| {
        b.iter(|| materialize(black_box(&params)).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let layer = bench_layer(8, &[64; 4], 0.5, 2.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = normal_matrix(8, 256, 1.0, &mut rng);
    c.bench_function("layer_forward_batch256", |b| {
        b.iter(|| layer.forward(black_box(&x)).unwrap())
    });
}

fn bench_certificate(c: &mut Criterion) {
    let layer = bench_layer(8, &[32; 4], 0.5, 2.0, 5);
    c.bench_function("certificate_check_4x32", |b| {
        b.iter(|| certificate_check(black_box(&layer)))
    });
}

criterion_group!(benches, bench_cayley, bench_materialize, bench_forward, bench_certificate);
criterion_main!(benches);
