//! Counter-based random streams: one independent ChaCha8 stream per
//! (seed, sample, purpose) triple, so ensembles are reproducible regardless of
//! how samples are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SampleRng = ChaCha8Rng;

/// What a stream is used for inside one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Chain = 0,
    Noise = 1,
    PoissonField = 2,
    Restart = 3,
}

/// Stream for sample `index` of the experiment seeded with `seed`.
pub fn substream(seed: u64, index: u64, purpose: Purpose) -> SampleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 2) | purpose as u64);
    rng
}
