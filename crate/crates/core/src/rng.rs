//! Counter/stream based random number generation.
//!
//! Every random draw in the crate comes from an [`RngStream`], a ChaCha8
//! keystream selected by `(master_seed, stream_id)` and positioned by a word
//! counter. Parallel work takes distinct stream ids instead of sharing one
//! mutable generator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids. Sub-streams are derived from these with
/// [`RngStream::substream`].
pub mod streams {
    pub const PUZZLES: u64 = 0x5055_5a5a;
    pub const EVAL_PUZZLES: u64 = 0x4556_414c;
    pub const INIT: u64 = 0x494e_4954;
    pub const WARM_START: u64 = 0x5741_524d;
    pub const JOINT: u64 = 0x4a4f_494e;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const METRICS: u64 = 0x4d45_5452;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A positioned random stream. Cloning yields an independent copy at the same
/// position, so the type behaves like a value.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self::at(master_seed, stream_id, 0)
    }

    /// Stream positioned at word `counter` (32-bit words consumed so far).
    pub fn at(master_seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        inner.set_word_pos(counter as u128);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    /// Fresh stream with an id derived from this stream's id and `label`.
    pub fn substream(&self, label: u64) -> Self {
        Self::new(
            self.master_seed,
            splitmix64(self.stream_id ^ splitmix64(label.wrapping_add(1))),
        )
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// In-place Fisher-Yates shuffle driven by an [`RngStream`].
pub fn shuffle<T>(items: &mut [T], rng: &mut RngStream) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
