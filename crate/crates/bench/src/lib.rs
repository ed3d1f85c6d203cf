//! Shared fixtures for the criterion benches.

use flexrel_core::{synth_dataset, Dataset, Network, SynthSpec, Tensor};

/// Deterministic pseudo-random tensor without pulling an RNG crate into the
/// bench dependencies.
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// The desk CNN on 16×16 inputs with 10 classes, cut after the first block.
pub fn desk_network(seed: u64) -> Network {
    Network::from_kinds(vec![1, 16, 16], &Network::desk_cnn_kinds(16, 10), 3, seed).expect("valid desk net")
}

pub fn desk_data(train: usize) -> Dataset {
    synth_dataset(
        &SynthSpec {
            train,
            test: 10,
            ..SynthSpec::default()
        },
        0,
    )
    .expect("valid spec")
}
