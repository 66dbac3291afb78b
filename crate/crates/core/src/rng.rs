//! Keyed random streams.
//!
//! Every consumer of randomness asks for a stream identified by
//! `(purpose, device, round)` under a master seed. The key selects a ChaCha
//! stream, so a device's draws never depend on how many numbers another
//! device or phase consumed, or on the order devices are processed in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Purpose {
    DataGen = 1,
    Holdout = 2,
    Partition = 3,
    ModelInit = 4,
    DeviceSelection = 5,
    BatchSampling = 6,
    Probe = 7,
    Reference = 8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub purpose: Purpose,
    pub device: u32,
    pub round: u32,
}

impl RngStream {
    pub fn new(master_seed: u64, purpose: Purpose, device: usize, round: usize) -> Self {
        RngStream {
            master_seed,
            purpose,
            device: device as u32,
            round: round as u32,
        }
    }

    /// Stream for a phase that is not tied to a device or round.
    pub fn global(master_seed: u64, purpose: Purpose) -> Self {
        Self::new(master_seed, purpose, 0, 0)
    }

    /// 64-bit ChaCha stream id. Purpose takes the top byte, the device the
    /// next 24 bits and the round the low 32, so distinct keys never collide
    /// for up to 2^24 devices.
    pub fn stream_id(&self) -> u64 {
        ((self.purpose as u64) << 56) | ((self.device as u64 & 0x00FF_FFFF) << 32) | self.round as u64
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id());
        rng
    }
}
