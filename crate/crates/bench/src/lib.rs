//! Fixture builders shared by the criterion benchmarks.

use laber_core::grad::{Activation, Network, Target};
use laber_core::sampling::SumTree;
use rand::Rng;

/// Sum tree of `n` leaves with spread, nonzero priorities.
pub fn filled_tree(n: usize) -> SumTree {
    let mut tree = SumTree::new(n);
    for i in 0..n {
        tree.set(i, (i % 17 + 1) as f64).expect("in range");
    }
    tree
}

/// MLP sized like the experiment agents.
pub fn bench_network<R: Rng>(
    input_dim: usize,
    hidden: &[usize],
    outputs: usize,
    rng: &mut R,
) -> Network {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(outputs);
    Network::mlp(&dims, Activation::Identity, rng).expect("valid dims")
}

/// Batch of dense inputs in [-0.5, 0.5).
pub fn random_inputs<R: Rng>(rng: &mut R, batch: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect())
        .collect()
}

/// One scalar regression target per sample, cycling over the outputs.
pub fn scalar_targets<R: Rng>(rng: &mut R, batch: usize, outputs: usize) -> Vec<Target> {
    (0..batch)
        .map(|i| Target::Scalar {
            index: i % outputs,
            value: rng.gen::<f64>(),
        })
        .collect()
}
