//! Seeded random streams. Every stochastic choice in the crate (weight
//! init, shuffles, PGD starts, synthetic data) draws from one of these.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

pub type Stream = ChaCha8Rng;

pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream label (splitmix64 finalizer), so related
/// jobs get independent but reproducible streams.
pub fn derive(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform<T: Real>(rng: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

pub fn normal<T: Real>(rng: &mut Stream, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(mean + std * z)
    })
}

pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Tensor<f64> = uniform(&mut seeded(3), &[10], 0.0, 1.0);
        let b: Tensor<f64> = uniform(&mut seeded(3), &[10], 0.0, 1.0);
        let c: Tensor<f64> = uniform(&mut seeded(4), &[10], 0.0, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive(1, 0), derive(1, 1));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = permutation(&mut seeded(9), 100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
