//! Seeded pseudo-randomness for corpus generation, parameter initialization
//! and batch sampling.
//!
//! Every random draw in this workspace flows through [`Rng`], a xoshiro256**
//! generator seeded through SplitMix64. Both algorithms are fixed here (not
//! pulled from a crate) so that a seed pins the exact bit stream: two runs
//! with the same seed produce identical corpora, identical initial weights
//! and identical batch orders. Gaussian samples use the Box-Muller transform
//! (cosine branch), so they are deterministic given the seed for a fixed
//! build; `ln`/`cos` go through the platform libm, which can differ in the
//! last ulp between targets.

/// SplitMix64 finalizer: one full avalanche step over `x`.
///
/// Used for seed expansion, sub-stream derivation and index hashing
/// (e.g. corpus split assignment).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream id for model parameter initialization (see [`Rng::derive`]).
pub const STREAM_MODEL_INIT: u64 = 1;
/// Stream id for training batch sampling.
pub const STREAM_BATCH: u64 = 2;

/// xoshiro256** generator with SplitMix64 seeding.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    /// Expands `seed` into the 256-bit state via four SplitMix64 steps.
    pub fn seed_from(seed: u64) -> Self {
        let mut x = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
            *word = splitmix64(x);
        }
        // xoshiro cannot leave the all-zero state.
        if state == [0; 4] {
            state[0] = 1;
        }
        Rng { state }
    }

    /// Derives an independent sub-stream from `(seed, stream)`.
    ///
    /// Distinct stream ids (model init, batch order, ...) decorrelate the
    /// consumers so adding draws to one stream never shifts another.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::seed_from(splitmix64(seed) ^ splitmix64(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.state[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.state[1] << 17;
        self.state[2] ^= self.state[0];
        self.state[3] ^= self.state[1];
        self.state[1] ^= self.state[2];
        self.state[0] ^= self.state[3];
        self.state[2] ^= t;
        self.state[3] = self.state[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Uniform integer in `[lo, hi]` (both ends inclusive).
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range [{lo}, {hi}]");
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal sample, Box-Muller cosine branch.
    ///
    /// Consumes exactly two uniforms per call; no spare is cached, keeping
    /// the draw count a pure function of the call count.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]: keeps ln away from 0
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// FNV-1a over the raw bit patterns of `values`.
///
/// Bit-exact parameter fingerprints: two parameter sets hash equal iff every
/// entry is bitwise identical (including signed zeros and NaN payloads).
pub fn bits_hash(values: &[f64]) -> u64 {
    fold_bits_hash(0xcbf2_9ce4_8422_2325, values)
}

/// Folds `values` into an existing FNV-1a state; used to chain several
/// tensors into one model-level fingerprint.
pub fn fold_bits_hash(mut hash: u64, values: &[f64]) -> u64 {
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    hash
}
