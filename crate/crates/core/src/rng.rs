// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded, portable randomness.
//!
//! All draws go through ChaCha8 seeded with `seed_from_u64`, and integer
//! ranges use rejection sampling on `next_u64` so the sequence depends only
//! on the ChaCha8 keystream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator for `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `[0, bound)`.
pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    // Largest multiple of `bound` that fits; draws at or above it are retried.
    let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % bound;
        }
    }
}

/// Uniform in `[0, 1)` with 53 random bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates from the last position down.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// `count` distinct elements of `pool`: shuffle, take the prefix, sort.
pub fn sample_sorted<T: Clone + Ord>(rng: &mut impl RngCore, pool: &[T], count: usize) -> Vec<T> {
    assert!(count <= pool.len(), "sample larger than pool");
    let mut items = pool.to_vec();
    shuffle(rng, &mut items);
    items.truncate(count);
    items.sort();
    items
}

/// Index drawn with probability proportional to `weights`.
pub fn categorical(rng: &mut impl RngCore, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = unit_f64(rng) * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Vec<u64> = (0..5).map(|_| below(&mut seeded(9), 1000)).collect();
        let mut r1 = seeded(9);
        let mut r2 = seeded(9);
        let x: Vec<u64> = (0..50).map(|_| below(&mut r1, 17)).collect();
        let y: Vec<u64> = (0..50).map(|_| below(&mut r2, 17)).collect();
        assert_eq!(x, y);
        assert!(a.iter().all(|&v| v < 1000));
    }

    #[test]
    fn streams_differ() {
        let x = stream(1, 0).next_u64();
        let y = stream(1, 1).next_u64();
        assert_ne!(x, y);
    }

    #[test]
    fn below_covers_range_roughly_uniformly() {
        let mut rng = seeded(5);
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            counts[below(&mut rng, 6) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (9_000..11_000).contains(&c)), "{counts:?}");
        assert_eq!(below(&mut rng, 1), 0);
    }

    #[test]
    fn sample_is_sorted_distinct_subset() {
        let pool: Vec<usize> = (0..16).collect();
        for seed in 0..20 {
            let s = sample_sorted(&mut seeded(seed), &pool, 5);
            assert_eq!(s.len(), 5);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(sample_sorted(&mut seeded(0), &pool, 16), pool);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert_ne!(categorical(&mut rng, &[0.5, 0.0, 0.5]), 1);
        }
    }
}
