//! Seed derivation and the generator used for every random draw.
//!
//! All randomness in a run flows from one master seed. Child seeds are
//! derived by folding a path of integers (domain tag, segment index, seed
//! index, ...) through SplitMix64, so a job's stream depends only on its
//! position in the experiment and never on scheduling order.
//!
//! The generator is ChaCha20 as implemented by `rand_chacha` (RFC 7539 core,
//! published test vectors). Its 256-bit key is four consecutive SplitMix64
//! outputs of the derived seed, little-endian.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Identity string recorded in every emitted report.
pub const RNG_ALGORITHM: &str = "chacha20(rand_chacha 0.9); key=4x splitmix64(seed) LE; child seeds=splitmix64 path fold";

pub type Rng = ChaCha20Rng;

pub(crate) mod domain {
    pub const PROBE: u64 = 0x7072_6f62;
    pub const MASK: u64 = 0x6d61_736b;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const GAP: u64 = 0x6761_7073;
}

#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `path` into `master` to obtain an independent child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &p in path {
        state = out ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out = splitmix64(&mut state);
    }
    out
}

pub fn rng_from_seed(seed: u64) -> Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

pub fn derived_rng(master: u64, path: &[u64]) -> Rng {
    rng_from_seed(derive_seed(master, path))
}
