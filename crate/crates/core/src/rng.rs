//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(master seed, purpose tag, index...)`. Streams never share state, so the
//! order in which consumers run (or how many threads run them) cannot change
//! the numbers any one of them sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `purpose` at the given index path.
    pub fn stream(&self, purpose: &str, index: &[u64]) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(purpose, index));
        rng
    }

    /// A child seed, for handing a sub-seed to code that takes a plain `u64`.
    pub fn derive_seed(&self, purpose: &str, index: &[u64]) -> u64 {
        splitmix(self.seed ^ stream_id(purpose, index))
    }
}

fn stream_id(purpose: &str, index: &[u64]) -> u64 {
    // FNV-1a over the tag bytes, then splitmix-fold each index in.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &i in index {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
