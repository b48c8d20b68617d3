//! Seed derivation for reproducible draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator derived from (seed, label) through SHA-256, so draws stay
/// reproducible across platforms and releases regardless of hasher changes.
pub fn subseed_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut material = seed.to_le_bytes().to_vec();
    material.extend_from_slice(label.as_bytes());
    let digest = crate::chat::hex_digest(&material);
    let mut eight = [0u8; 8];
    for (i, chunk) in digest.as_bytes().chunks(2).take(8).enumerate() {
        eight[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
    }
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(eight))
}
