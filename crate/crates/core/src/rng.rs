//! Seed derivation. All randomness in an experiment flows from one global
//! seed through named substreams, so stages can be re-run or parallelized
//! without perturbing each other's draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(seed, name)`.
///
/// The key is SHA-256 over the little-endian seed followed by the UTF-8
/// stream name, so distinct names give statistically independent streams.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derive the u64 sub-seed that `substream` would be keyed from, for logging.
pub fn subseed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
