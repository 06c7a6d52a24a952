//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by a
//! user seed, a fixed domain tag and an index, so that e.g. the master mask
//! and the aperture patterns never share draws even when seeded identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const DOMAIN_MASTER_MASK: u64 = 1;
pub(crate) const DOMAIN_PATTERN: u64 = 2;
pub(crate) const DOMAIN_NOISE: u64 = 3;

pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}

/// FNV-1a, used for stable fingerprints that must not depend on the std hasher.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
