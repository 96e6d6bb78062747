//! Deterministic randomness: one root seed fanned out into named streams.
//!
//! Every source of randomness in the crate (weight init, data shuffling,
//! channel states, transmission noise, dropout, stochastic depth, diffusion
//! sampling) draws from its own [`ChaCha12Rng`] stream derived from the root
//! seed and a stream name, so subsystems never perturb each other's draws and
//! identical seeds reproduce runs bit for bit.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha12Rng;

/// Fans a root seed out into independent named streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// A fresh RNG for the given stream name.
    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(derive(self.root, name, 0))
    }

    /// A fresh RNG for the given stream name and index (e.g. an epoch).
    pub fn substream(&self, name: &str, index: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(derive(self.root, name, index))
    }
}

/// Platform-independent seed derivation: FNV-1a over the name, mixed with the
/// root and index through splitmix64 finalizers.
fn derive(root: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
