//! Deterministic seed derivation. Every stochastic phase draws from a
//! ChaCha8 stream keyed by (master seed, purpose tags) so runs are
//! reproducible and resumable at epoch granularity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a purpose tag and numeric indices into one u64.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for b in tag.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn derive_rng(master: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}

/// FNV-1a over raw bytes; used for config digests and frozen-parameter
/// checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
