//! Fixed-seed fixtures shared by the benchmarks.

use lindt_core::nn::{Activation, Batch, LayerStack, WeightVector};
use lindt_core::{generate_task, Result, SyntheticTaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The default scenario network: 16 inputs, two hidden layers of 32, 4 classes.
pub fn default_stack() -> Result<LayerStack> {
    LayerStack::mlp(&[16, 32, 32, 4], Activation::Relu)
}

/// A batch of `n` samples from the default synthetic task.
pub fn batch(n: usize) -> Result<Batch> {
    let task = generate_task(&SyntheticTaskSpec { samples: n.max(8), ..Default::default() })?;
    let data = task.data;
    let x = data.features.slice(ndarray::s![..n, ..]).to_owned();
    Batch::new(x, data.labels[..n].to_vec())
}

/// `k` independently initialised weight vectors for `stack`.
pub fn uploads(stack: &LayerStack, k: usize, seed: u64) -> Vec<WeightVector> {
    let mut r = rng(seed);
    (0..k).map(|_| stack.init_weights(&mut r)).collect()
}
