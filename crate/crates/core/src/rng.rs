//! Seeded random streams. Every run derives all randomness from one seed,
//! split into independent named streams so that changing how much data is
//! drawn never perturbs initialization (and vice versa).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Shuffle,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Shuffle => 3,
            Stream::Eval => 4,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Generator for an individually addressable item (e.g. scene `index` of a
/// dataset drawn from `seed`).
pub fn item(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, which);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}
