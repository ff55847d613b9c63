//! Named random substreams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Datagen,
    Gumbel,
    Init,
    Shuffle,
    Posterior,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Datagen => 1,
            Stream::Gumbel => 2,
            Stream::Init => 3,
            Stream::Shuffle => 4,
            Stream::Posterior => 5,
        }
    }
}

/// Independent ChaCha stream for `(seed, stream)`.
pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
