//! Counter-based, splittable random streams.
//!
//! Every random draw in a run is addressed by a path of integers rooted at
//! the run seed, e.g. `(seed, "task", iteration, slot)`. The path is hashed
//! into a ChaCha8 key, so any stream can be reconstructed without replaying
//! the ones before it. Parallel workers therefore see exactly the numbers a
//! sequential run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey(u64);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed ^ 0x6a09_e667_f3bc_c908))
    }

    /// Child key for a named purpose.
    pub fn child(self, label: &str) -> Self {
        let mut h = self.0;
        for b in label.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        RngKey(splitmix64(h ^ 0xff))
    }

    /// Child key for an integer index.
    pub fn index(self, i: u64) -> Self {
        RngKey(splitmix64(
            self.0.rotate_left(17) ^ splitmix64(i.wrapping_add(0x9e37_79b9)),
        ))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn stream(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut s = self.0;
        for chunk in seed.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
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
