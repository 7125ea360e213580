use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qnetlab::graph::{contains_subgraph, sample_gnp, threshold_sweep, SubgraphPattern};
use qnetlab::rng::stream;

fn containment(c: &mut Criterion) {
    let mut rng = stream(1, 0, 0);
    let g = sample_gnp(512, 512f64.powf(-0.7), &mut rng).unwrap();
    for pattern in [SubgraphPattern::triangle(), SubgraphPattern::k4(), SubgraphPattern::square()] {
        c.bench_function(&format!("contains {} in G(512, N^-0.7)", pattern.name()), |b| {
            b.iter(|| contains_subgraph(black_box(&g), black_box(&pattern)))
        });
    }
}

fn sweep(c: &mut Criterion) {
    let zs: Vec<f64> = (0..=20).map(|i| -1.5 + 0.05 * i as f64).collect();
    c.bench_function("triangle sweep N=256, 50 trials", |b| {
        b.iter(|| threshold_sweep(&SubgraphPattern::triangle(), &[256], &zs, 1.0, 50, 3).unwrap())
    });
}

criterion_group!(benches, containment, sweep);
criterion_main!(benches);
