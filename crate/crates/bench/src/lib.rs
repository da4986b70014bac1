//! Inputs shared by the benchmarks.

use motionprior::tensor::Tensor;
use motionprior::volume::{generate_phantom, Contrast};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central T2 slice of a seeded phantom.
pub fn phantom_slice(n: usize) -> Array2<f32> {
    let set = generate_phantom(11, [n, n, 16], 40).expect("valid phantom size");
    set[&Contrast::T2].data().slice(s![.., .., 8]).to_owned()
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
