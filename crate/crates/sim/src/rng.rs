use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based uniform draws keyed by `(seed, step, purpose tag)`.
///
/// Each key selects an independent ChaCha stream position, so a draw never
/// depends on how many other draws happened before it.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Generator positioned at `(step, tag)`; consecutive draws from it are the
    /// sub-counter within that key.
    pub fn stream(&self, step: u64, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag);
        // 2^32 words per step is far more than any consumer draws
        rng.set_word_pos((step as u128) << 32);
        rng
    }

    pub fn uniform(&self, step: u64, tag: u64, index: u64) -> f64 {
        let mut rng = self.stream(step, tag);
        rng.set_word_pos(((step as u128) << 32) + 2 * index as u128);
        rng.gen::<f64>()
    }
}
