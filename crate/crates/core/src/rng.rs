//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, domain, stream, index)`: the
//! Philox4x64-10 block cipher is keyed by the seed and encrypts the counter
//! `(block, stream, domain, 0)`. An ensemble member `k` therefore owns stream
//! `k` and produces the same numbers no matter which worker computes it or in
//! which order members run.
//!
//! Gaussian variates come from the inverse normal CDF of one uniform each, so
//! the number of raw draws per variate is fixed and streams never drift.

use crate::special::normal_quantile_rational;

const PHILOX_M0: u64 = 0xD2E7_470E_E14C_6C93;
const PHILOX_M1: u64 = 0xCA5A_8263_9512_1157;
const PHILOX_W0: u64 = 0x9E37_79B9_7F4A_7C15;
const PHILOX_W1: u64 = 0xBB67_AE85_84CA_A73B;

/// Stream domains keep independent uses of one master seed apart.
pub mod domain {
    /// Per-member prior-mean and observation-noise draws.
    pub const ENSEMBLE_MEMBER: u64 = 1;
    /// Noise for the synthetic "real" observation used by the central inversion.
    pub const OBSERVATION: u64 = 2;
    /// Random structure of synthetic operators.
    pub const SYNTHETIC_OPERATOR: u64 = 3;
    /// Derivation of per-replicate seeds in repeated experiments.
    pub const REPLICATE: u64 = 4;
    /// Random probes for adjoint checks.
    pub const PROBE: u64 = 5;
}

#[inline]
fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let p = (a as u128) * (b as u128);
    ((p >> 64) as u64, p as u64)
}

/// Philox4x64 with 10 rounds.
pub fn philox4x64(counter: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// SplitMix64 finalizer, used to spread a user seed over the Philox key.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A sequential reader over one counter-based stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: [u64; 2],
    stream: u64,
    domain: u64,
    block: u64,
    buffer: [u64; 4],
    used: usize,
}

impl StreamRng {
    pub fn new(seed: u64, domain: u64, stream: u64) -> Self {
        let k0 = splitmix64(seed);
        let key = [k0, splitmix64(k0 ^ seed.rotate_left(32))];
        Self {
            key,
            stream,
            domain,
            block: 0,
            buffer: [0; 4],
            used: 4,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.used == 4 {
            self.buffer = philox4x64([self.block, self.stream, self.domain, 0], self.key);
            self.block += 1;
            self.used = 0;
        }
        let v = self.buffer[self.used];
        self.used += 1;
        v
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        normal_quantile_rational(self.uniform())
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.standard_normal());
    }

    /// A fresh 64-bit seed, for deriving nested experiments.
    pub fn derive_seed(&mut self) -> u64 {
        self.next_u64()
    }
}
