//! Counter-based random numbers.
//!
//! Every random draw in the crate goes through [`Rng`], a ChaCha20 keystream
//! (RFC 7539 block function, 20 rounds) keyed by the 64-bit seed written
//! little-endian into the first 8 key bytes (remaining 24 bytes zero), with
//! the 64-bit stream id selecting the nonce. The keystream is consumed as
//! little-endian `u64` words. Derived values:
//!
//! * `uniform()`: `(w >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()`: Box-Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * `below(n)`: `floor(uniform() * n)`.
//!
//! The position in the keystream is exposed as [`RngState`] so training can
//! checkpoint and resume without perturbing later draws.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Serializable keystream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 32-bit word offset into the keystream, split into u64 halves
    /// (TOML and JSON carry no u128).
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rng {
    inner: ChaCha20Rng,
    seed: u64,
    stream: u64,
}

/// Well-known stream ids, so that unrelated consumers never share a keystream.
pub mod streams {
    pub const TEACHER_INIT: u64 = 1;
    pub const ENCODER_INIT: u64 = 2;
    pub const DECODER_INIT: u64 = 3;
    pub const BOTTLENECK_INIT: u64 = 4;
    pub const TRAIN: u64 = 10;
    pub const FEW_SHOT: u64 = 20;
    pub const DATA_BASE: u64 = 1 << 32;
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Rng {
            inner,
            seed,
            stream,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed, state.stream);
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        rng.inner.set_word_pos(pos);
        rng
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
