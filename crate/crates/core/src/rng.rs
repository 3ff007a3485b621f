//! Counter-keyed random streams.
//!
//! Every stochastic routine takes an explicit stream. Streams are derived from
//! `(master_seed, purpose, cell, user)` so results never depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Derives an independent stream keyed by `(master_seed, purpose, cell, user)`.
pub fn stream(master_seed: u64, purpose: &str, cell: u64, user: u64) -> Stream {
    let mut state = master_seed;
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state) ^ fnv1a(purpose.as_bytes()),
        splitmix64(&mut state) ^ cell.wrapping_mul(0xD6E8_FEB8_6659_FD93),
        splitmix64(&mut state) ^ user.wrapping_mul(0xA076_1D64_78BD_642F),
        splitmix64(&mut state),
    ];
    let mut mix = words[0] ^ words[1].rotate_left(17) ^ words[2].rotate_left(41) ^ words[3];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        let v = splitmix64(&mut mix) ^ w;
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    Stream::from_seed(key)
}

#[inline]
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

#[inline]
pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::of(rng.gen::<f64>())
}

/// Draws an index from a probability vector by inversion.
pub fn categorical<T: Scalar, R: Rng + ?Sized>(rng: &mut R, probs: &[T]) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}
