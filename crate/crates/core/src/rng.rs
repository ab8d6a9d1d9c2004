//! SplitMix64 random source.
//!
//! Every random decision in the pipeline (feature bank, bootstrap draws,
//! node subsampling, thresholds, step-sequence sampling) is drawn from this
//! generator so that a run is fully determined by its master seed. The
//! generator is the reference SplitMix64:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! Derived draws are defined on top of `next_u64`:
//!
//! * `below(n)`: rejection sampling, discarding values `>= 2^64 - (2^64 mod n)`,
//!   then `value mod n`.
//! * `unit_f64()`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`.
//! * `derive(seed, stream)`: one SplitMix64 output of state
//!   `seed ^ (stream * 0xD1B54A32D192ED03)`, used for independent sub-streams.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform `u128` in `[0, n)`, used when sampling ranks of very large sets.
    pub fn below_u128(&mut self, n: u128) -> u128 {
        assert!(n > 0, "below_u128(0)");
        if n <= u64::MAX as u128 {
            return self.below(n as u64) as u128;
        }
        let zone = u128::MAX - (u128::MAX - n + 1) % n;
        loop {
            let v = ((self.next_u64() as u128) << 64) | self.next_u64() as u128;
            if v <= zone {
                return v % n;
            }
        }
    }

    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    #[inline]
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }
}

/// Seed of an independent sub-stream.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix((seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)).wrapping_add(GOLDEN))
}
