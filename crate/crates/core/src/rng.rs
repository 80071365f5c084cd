//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream. Streams for parallel
//! work (one per chain, one per item) are derived from a root seed and integer
//! coordinates, so results never depend on how work is partitioned.

use rand::SeedableRng;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Domain tags keep derived streams for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Teacher = 0x7465_6163,
    Inference = 0x696e_6665,
    Init = 0x696e_6974,
    Trainer = 0x7472_6169,
    Mixture = 0x6d69_7874,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by `(seed, domain, a, b)`.
pub fn derive(seed: u64, domain: Domain, a: u64, b: u64) -> Stream {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain as u64);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(32));
    ChaCha8Rng::seed_from_u64(h)
}

#[inline]
pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
