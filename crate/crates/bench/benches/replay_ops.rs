use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use laber_bench::filled_tree;
use laber_core::sampling::{sample_indices, Distribution};
use laber_core::seeds::{rng_for, Consumer};
use rand::Rng;

fn sum_tree_ops(c: &mut Criterion) {
    let mut group = c.benchmark_group("sum_tree");
    for &n in &[1 << 10, 1 << 14] {
        let mut tree = filled_tree(n);
        let mut rng = rng_for(7, Consumer::Sampler);
        group.bench_with_input(BenchmarkId::new("set", n), &n, |b, &n| {
            b.iter(|| {
                let i = rng.gen_range(0..n);
                tree.set(i, rng.gen::<f64>() + 0.1).unwrap();
                black_box(tree.total())
            })
        });
        let tree = filled_tree(n);
        group.bench_with_input(BenchmarkId::new("sample", n), &n, |b, _| {
            b.iter(|| black_box(tree.sample(&mut rng).unwrap()))
        });
    }
    group.finish();
}

fn distribution_ops(c: &mut Criterion) {
    let mut rng = rng_for(7, Consumer::Sampler);
    let weights: Vec<f64> = (0..512).map(|_| rng.gen::<f64>() + 1e-3).collect();
    c.bench_function("distribution/from_weights_512", |b| {
        b.iter(|| black_box(Distribution::from_weights(black_box(&weights)).unwrap()))
    });
    let dist = Distribution::from_weights(&weights).unwrap();
    c.bench_function("distribution/sample_32_of_512", |b| {
        b.iter(|| black_box(sample_indices(&dist, 32, &mut rng)))
    });
}

criterion_group!(benches, sum_tree_ops, distribution_ops);
criterion_main!(benches);
