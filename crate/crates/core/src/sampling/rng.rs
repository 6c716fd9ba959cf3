//! Counter-addressable random streams.
//!
//! A stream is identified by `(seed, layer_id, step, lane)`; these four words
//! form the ChaCha key, so every address owns an independent keystream that
//! can be regenerated at any time without shared state. Within one address,
//! ChaCha's 64-bit stream id selects further substreams (one per sampling
//! grid, for instance).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Logical position of a draw inside a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub layer_id: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(layer_id: u64, step: u64) -> Self {
        Self { layer_id, step }
    }
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: StreamKey,
    lane: u64,
    substream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        Self::at(seed, key, 0, 0)
    }

    fn at(seed: u64, key: StreamKey, lane: u64, substream: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.layer_id.to_le_bytes());
        bytes[16..24].copy_from_slice(&key.step.to_le_bytes());
        bytes[24..32].copy_from_slice(&lane.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(substream);
        Self {
            seed,
            key,
            lane,
            substream,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Fresh stream at the same `(seed, key)` but a different lane. Lanes
    /// separate batch items.
    pub fn lane(&self, lane: u64) -> RngStream {
        Self::at(self.seed, self.key, lane, 0)
    }

    /// Fresh substream of this lane, rewound to its first draw.
    pub fn substream(&self, id: u64) -> RngStream {
        Self::at(self.seed, self.key, self.lane, id)
    }

    /// Same address, rewound to the first draw.
    pub fn restart(&self) -> RngStream {
        Self::at(self.seed, self.key, self.lane, self.substream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.rng.random_range(0..bound)
    }
}
