//! Seeded random streams.
//!
//! Every stream is a Xoshiro256++ generator. Stream `stream_id` of `seed`
//! starts from `x = derive_seed(seed, stream_id)` and fills the four state
//! words with consecutive SplitMix64 outputs:
//!
//! ```text
//! s[i] = splitmix64(x + i * 0x9e37_79b9_7f4a_7c15),  i = 0..3
//! ```
//!
//! Uniforms in `[0, 1)` take the top 53 bits of `next_u64`. Normals use the
//! Box–Muller transform on two uniforms `u1, u2`, with `u1` mapped to `(0, 1]`:
//! `r = sqrt(-2 ln u1)`, first draw `r cos(2π u2)`, second draw `r sin(2π u2)`.
//! The second draw is cached and returned by the next call. Bounded integers use
//! the widening multiply `(next_u64 * n) >> 64`.
//!
//! Anyone reimplementing these four rules gets the same sequences.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{LabError, Result};
use crate::numkit::Tensor;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// One step of the SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with an index into a child seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(GOLDEN)))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    gen: Xoshiro256PlusPlus,
    cached_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream_id` under the same seed.
    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let x = derive_seed(seed, stream_id);
        let mut bytes = [0u8; 32];
        for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            let word = splitmix64(x.wrapping_add((i as u64).wrapping_mul(GOLDEN)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            seed,
            stream_id,
            gen: Xoshiro256PlusPlus::from_seed(bytes),
            cached_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.gen.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. Gaussian tensor. `std == 0` yields a constant tensor without drawing.
pub fn normal_sample(rng: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(LabError::Domain(format!(
            "normal_sample: standard deviation must be >= 0, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![mean; n]
    } else {
        (0..n).map(|_| mean + std * rng.standard_normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}
