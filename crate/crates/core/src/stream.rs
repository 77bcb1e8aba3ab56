//! Hierarchical, counter-based random streams.
//!
//! A [`StreamKey`] names a position in a tree rooted at a 64-bit seed
//! (replication -> run index -> evaluation slot). Deriving a child is a pure
//! hash of the parent digest and the child index, so any worker can rebuild
//! the generator for any slot without shared state, and results do not depend
//! on scheduling order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Generator handed out for a single stream slot.
pub type StreamRng = Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    digest: u64,
    depth: u32,
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self {
            seed,
            digest: mix64(seed ^ 0x5EED_5EED_5EED_5EED),
            depth: 0,
        }
    }

    /// Derive the `index`-th sub-stream.
    #[inline]
    pub fn child(&self, index: u64) -> Self {
        let salt = mix64(index.wrapping_add(GOLDEN_GAMMA).wrapping_mul(GOLDEN_GAMMA));
        Self {
            seed: self.seed,
            digest: mix64(self.digest.rotate_left(17) ^ salt),
            depth: self.depth + 1,
        }
    }

    /// Derive along a whole path, e.g. `[replication, run]`.
    pub fn descend(&self, path: &[u64]) -> Self {
        path.iter().fold(*self, |k, &i| k.child(i))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Fresh generator positioned at the start of this stream.
    #[inline]
    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.digest)
    }
}
