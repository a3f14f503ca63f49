//! Seeded random streams and Xavier initialization.
//!
//! The generator is SplitMix64 used in counter mode. A stream is keyed by
//! `(seed, purpose, index)`:
//!
//! ```text
//! key   = mix(mix(seed ^ PURPOSE_TAG[purpose]) ^ mix(index + 1))
//! draw i = mix(key + (i + 1) * GAMMA)
//! mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!         z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!         z ^ (z >> 31)
//! ```
//!
//! with wrapping 64-bit arithmetic and `GAMMA = 0x9E3779B97F4A7C15`. A uniform
//! real in `[0, 1)` is `(draw >> 11) * 2^-53`. Because each draw depends only
//! on the key and its counter, streams for different purposes never interact.

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Init,
    DataOrder,
    #[serde(rename = "randomout")]
    RandomOut,
    /// Synthetic dataset generation and train/test splitting.
    Data,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494E_4954_0000_0001,
            Purpose::DataOrder => 0x4F52_4445_5200_0002,
            Purpose::RandomOut => 0x5245_5345_5400_0003,
            Purpose::Data => 0x4441_5441_0000_0004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
    purpose: Purpose,
}

pub fn derive_stream(seed: u64, purpose: Purpose, index: u64) -> RngStream {
    let key = mix(mix(seed ^ purpose.tag()) ^ mix(index.wrapping_add(1)));
    RngStream {
        key,
        counter: 0,
        purpose,
    }
}

impl RngStream {
    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller; consumes two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates from the last position down, drawing `below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// I.i.d. uniform draws on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(shape: Shape, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let mut t = Tensor::zeros(shape);
    xavier_fill(t.data_mut(), fan_in, fan_out, rng);
    t
}

pub fn xavier_fill(out: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    let b = xavier_bound(fan_in, fan_out);
    for v in out {
        *v = rng.uniform(-b, b);
    }
}
