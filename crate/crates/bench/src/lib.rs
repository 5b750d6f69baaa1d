//! Benchmark fixtures shared by the criterion targets.

use plgt_core::model::{Model, ModelConfig};
use plgt_core::trainkit::init_parameters;
use plgt_core::{SeedStream, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

/// Randomly initialised desk-sized model over a 32-token vocabulary.
pub fn desk_model(cfg: ModelConfig) -> Model {
    let params = init_parameters(&cfg, 7).expect("init");
    Model::new(cfg, params).expect("model")
}

/// `n` sentences of `len` ids drawn from the non-special range.
pub fn sentences(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SeedStream::new(seed);
    (0..n).map(|_| (0..len).map(|_| 4 + rng.below(vocab - 4) as u32).collect()).collect()
}
