//! Reproducible random substreams.
//!
//! Every Monte Carlo path owns the ChaCha stream selected by its path index,
//! and every period of that path starts at a fixed word offset inside the
//! stream. Draws therefore depend only on `(seed, path, period)`, never on
//! scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words reserved per period inside one path stream (2^24 32-bit words).
const PERIOD_WORD_SHIFT: u32 = 24;

#[derive(Debug, Clone)]
pub struct Substreams {
    base: ChaCha8Rng,
}

impl Substreams {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator positioned at the start of `period` on the stream of `path`.
    pub fn at(&self, path: u64, period: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(path);
        rng.set_word_pos(u128::from(period) << PERIOD_WORD_SHIFT);
        rng
    }

    /// Generator for a whole path, positioned at word zero.
    pub fn path(&self, path: u64) -> ChaCha8Rng {
        self.at(path, 0)
    }
}
