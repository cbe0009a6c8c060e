//! Seeded random streams.
//!
//! Every stochastic step draws from a [`ChaCha8Rng`]. ChaCha is a
//! counter-based generator: a 256-bit key plus a 64-bit stream id select an
//! independent keystream, so child streams are derived by hashing a parent
//! seed with a label (SplitMix64 finalizer) instead of consuming parent
//! output. Runs are reproducible from one `u64` seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a numeric label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label.wrapping_add(0x51ed_2701)))
}

/// Derives a child seed from `seed` and a textual label.
pub fn derive_seed_str(seed: u64, label: &str) -> u64 {
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        acc ^= u64::from(b);
        acc = acc.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(seed, acc)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A stream for `(seed, path...)`, e.g. `stream(seed, &[step, image, layer])`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let s = path.iter().fold(seed, |acc, &p| derive_seed(acc, p));
    rng_from_seed(s)
}
