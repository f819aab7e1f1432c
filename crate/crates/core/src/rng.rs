//! Keyed random streams.
//!
//! Every consumer of randomness (environment, action selection, each
//! oracle's noise) draws from its own ChaCha stream whose seed is derived
//! from a [`StreamKey`]. Two workers that hold different keys never share
//! state, so replications can be scheduled in any order and still reproduce
//! bit-identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u64)]
pub enum Channel {
    Environment = 1,
    Policy = 2,
    OracleNoise = 3,
    Design = 4,
    Estimator = 5,
    Audit = 6,
    Selftest = 7,
}

/// Coordinates of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub run: u64,
    pub epoch: u64,
    pub oracle: u64,
    pub channel: Channel,
}

impl StreamKey {
    pub fn new(seed: u64, run: u64, channel: Channel) -> Self {
        Self {
            seed,
            run,
            epoch: 0,
            oracle: 0,
            channel,
        }
    }

    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn with_oracle(mut self, oracle: u64) -> Self {
        self.oracle = oracle;
        self
    }

    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = self.seed ^ 0x6c70_6c72_5f63_6f72;
        let words = [
            self.run,
            self.epoch,
            self.oracle,
            self.channel as u64,
        ];
        for w in words {
            state = splitmix64(state ^ splitmix64(w.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
