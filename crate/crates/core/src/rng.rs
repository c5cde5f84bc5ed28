use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Random stream used by every stochastic step in the crate.
pub type SsdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SsdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for sub-task `index` of a run seeded with `seed`.
pub fn substream(seed: u64, index: u64) -> SsdRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// A fresh 64-bit seed for sub-task `index`, independent across `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    substream(seed, index).random()
}
