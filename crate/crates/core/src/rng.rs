//! Seeded, portable random streams.
//!
//! Every consumer draws from a PCG-64 (XSL-RR 128/64) stream. The stream
//! selector is derived from a purpose tag so that, for example, the prompt
//! sampler and the bootstrap resampler never share a sequence even when they
//! are handed the same seed.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type StreamRng = Pcg64;

fn fnv1a(tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Generator for `seed`, stream-separated by `purpose`.
pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    let mut mixer = Pcg64::seed_from_u64(seed);
    let state = (rand::Rng::next_u64(&mut mixer) as u128) << 64 | seed as u128;
    Pcg64::new(state, fnv1a(purpose) as u128)
}
