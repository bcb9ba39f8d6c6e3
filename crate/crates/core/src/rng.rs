//! Named, seedable random streams.
//!
//! Every source of randomness derives from one root seed plus a stream
//! name, so adding a consumer never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream for (root seed, name, index). The index lets a
/// stream fork per epoch or per cell without reusing draws.
pub fn substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut state = splitmix64(root ^ 0x9e37_79b9_7f4a_7c15);
    for &b in name.as_bytes() {
        state = splitmix64(state ^ u64::from(b));
    }
    state = splitmix64(state ^ index);
    let mut seed = [0u8; 32];
    let mut s = state;
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
