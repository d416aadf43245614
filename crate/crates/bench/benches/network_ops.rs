use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use laber_bench::{bench_network, random_inputs, scalar_targets};
use laber_core::grad::{per_sample_gradients, LossKind};
use laber_core::seeds::{rng_for, Consumer};

fn forward_backward(c: &mut Criterion) {
    let mut rng = rng_for(7, Consumer::Init);
    let net = bench_network(16, &[64, 64], 4, &mut rng);
    let mut group = c.benchmark_group("mlp_16x64x64x4");
    for &batch in &[32usize, 128, 512] {
        let inputs = random_inputs(&mut rng, batch, 16);
        let targets = scalar_targets(&mut rng, batch, 4);
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::new("forward", batch), &batch, |b, _| {
            b.iter(|| black_box(net.forward(black_box(&inputs)).unwrap()))
        });
        let cache = net.forward(&inputs).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", batch), &batch, |b, _| {
            b.iter(|| {
                black_box(per_sample_gradients(&net, &cache, &targets, LossKind::L2).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
