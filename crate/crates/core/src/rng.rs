//! Per-photon random streams.
//!
//! Every photon draws from its own ChaCha8 stream keyed by the run's master
//! seed and selected by the photon index, so a photon's walk depends only on
//! `(master_seed, photon_index)` and never on which worker traces it or in
//! what order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
    master_seed: u64,
    photon_index: u64,
    draw_counter: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, photon_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(photon_index);
        Self {
            inner,
            master_seed,
            photon_index,
            draw_counter: 0,
        }
    }

    /// Re-targets this stream at another photon of the same run without
    /// re-deriving the key.
    pub fn reset_to(&mut self, photon_index: u64) {
        self.inner.set_stream(photon_index);
        self.inner.set_word_pos(0);
        self.photon_index = photon_index;
        self.draw_counter = 0;
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn photon_index(&self) -> u64 {
        self.photon_index
    }

    /// Number of 64-bit draws taken so far.
    pub fn draw_counter(&self) -> u64 {
        self.draw_counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.draw_counter += 1;
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * INV_2_53
    }
}
