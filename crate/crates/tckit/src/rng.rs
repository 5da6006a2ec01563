//! Deterministic seed derivation and parameter sampling.
//!
//! Every source of randomness in the crate is a ChaCha8 stream keyed
//! by a seed derived from the run seed plus a purpose tag, so runs are
//! reproducible bit-for-bit regardless of execution order elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h = 0xcbf29ce484222325u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent stream seed from a base seed, a tag naming
/// the consumer, and an index (epoch, step, item...).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ hash_tag(tag)) ^ index)
}

pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Samples a tensor from a normal(0, std) truncated at two standard
/// deviations, the usual transformer init.
pub fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be positive");
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        };
    }
    t
}

/// Fisher–Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "init", 0), derive_seed(7, "init", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "shuffle", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "init", 1));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(8, "init", 0));
    }

    #[test]
    fn truncated_normal_respects_cutoff() {
        let mut rng = stream(42, "test", 0);
        let t = truncated_normal(&mut rng, 50, 40, 0.02);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut a: Vec<u32> = (0..100).collect();
        let mut b: Vec<u32> = (0..100).collect();
        shuffle(&mut stream(3, "s", 1), &mut a);
        shuffle(&mut stream(3, "s", 1), &mut b);
        assert_eq!(a, b);
        let mut c: Vec<u32> = (0..100).collect();
        shuffle(&mut stream(3, "s", 2), &mut c);
        assert_ne!(a, c);
    }
}
