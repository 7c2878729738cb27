//! Seed derivation and seeded initializers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable numeric tag for a string label.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Normal samples truncated to two standard deviations by rejection.
pub fn truncated_normal(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            out.push(v);
        }
    }
    out
}
