//! Shared inputs for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taylorformer::attention::dense;
use taylorformer::Tensor;

/// One head of normalised queries and keys plus values, `[1, d, n]` each.
pub fn qkv(d: usize, n: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = || Tensor::<f32>::uniform([1, d, n], 1.0, &mut rng);
    let q = dense::normalize_qk(&raw(), 0.5).expect("valid shape");
    let k = dense::normalize_qk(&raw(), 0.5).expect("valid shape");
    [q, k, raw()]
}

pub fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform([c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
