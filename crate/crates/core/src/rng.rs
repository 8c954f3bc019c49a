use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator keyed by `(seed, a, b, tag)`, independent of call order.
pub fn keyed_rng(seed: u64, a: u64, b: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, a, b, tag].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
