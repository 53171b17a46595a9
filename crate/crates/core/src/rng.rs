//! Named random sub-streams derived from a single user seed.
//!
//! Every component draws from its own ChaCha stream so that, for example,
//! changing the TM batch order never perturbs the generated problem.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Gen,
    Rsvd,
    TmBatch,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Gen => 1,
            Stream::Rsvd => 2,
            Stream::TmBatch => 3,
            Stream::Test => 0xfeed,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
