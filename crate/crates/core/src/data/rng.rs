//! Counter-based random streams.
//!
//! A stream is identified by `(master_seed, stream_id)` and backed by ChaCha8
//! keyed with the master seed and positioned on the 64-bit ChaCha stream
//! `stream_id`. Output is a pure function of the identity and the draw index,
//! so work split across threads reproduces bit-for-bit as long as every unit
//! of work owns a stream derived by label rather than by call order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a master seed.
    pub fn new(master_seed: u64) -> Self {
        Self::with_stream(master_seed, 0)
    }

    pub fn with_stream(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives an independent child stream. Depends only on the parent's
    /// identity, never on how many values the parent has already produced.
    /// Derivation is ordered: `child(child(s, a), b) != child(child(s, b), a)`.
    pub fn child(&self, label: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(label.wrapping_mul(GOLDEN) ^ 0xD134_2543_DE82_EF95));
        RngStream::with_stream(self.master_seed, id)
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
