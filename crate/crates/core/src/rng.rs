//! Seeded random streams; every consumer gets its own ChaCha stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Partition = 3,
    Synthetic = 4,
    Topology = 5,
}

/// Stream `id` (e.g. an agent id) of `purpose` under the run `seed`.
pub fn stream(seed: u64, purpose: Purpose, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((purpose as u64) << 56));
    rng.set_stream(id);
    rng
}
