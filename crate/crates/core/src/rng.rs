//! Counter-based random numbers (Philox4x32-10).
//!
//! Every draw is a pure function of `(seed, path, stream, index, lane)`, so
//! Monte Carlo paths can be generated in any order or on any thread and
//! still reproduce bit for bit.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;
const ROUNDS: usize = 10;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

#[inline(always)]
fn round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (hi0, lo0) = mulhilo(M0, ctr[0]);
    let (hi1, lo1) = mulhilo(M1, ctr[2]);
    [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0]
}

/// Philox4x32 with 10 rounds, keyed by a 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Philox {
    key: [u32; 2],
}

impl Philox {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    pub fn block(&self, counter: [u32; 4]) -> [u32; 4] {
        let mut ctr = counter;
        let mut key = self.key;
        for i in 0..ROUNDS {
            if i > 0 {
                key[0] = key[0].wrapping_add(W0);
                key[1] = key[1].wrapping_add(W1);
            }
            ctr = round(ctr, key);
        }
        ctr
    }

    /// Child seed for sub-experiment `index`; distinct indices give
    /// unrelated streams.
    pub fn derive_seed(&self, index: u64) -> u64 {
        let out = self.block([index as u32, (index >> 32) as u32, u32::MAX, u32::MAX]);
        u64::from(out[0]) | (u64::from(out[1]) << 32)
    }
}

/// Purpose tags keeping the simulator's draws in disjoint counter ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Stream {
    Brownian = 1,
    Dither = 2,
    InitialState = 3,
    Perturbation = 4,
}

/// Gaussian draws addressed by `(index, lane)` inside one `(seed, path,
/// stream)` triple.
#[derive(Debug, Clone, Copy)]
pub struct NormalStream {
    rng: Philox,
    path: u32,
    stream: u16,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64, stream: Stream) -> Self {
        // Paths beyond 2^32 fold their high bits into the key.
        let rng = Philox::new(seed ^ (path >> 32).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Self {
            rng,
            path: path as u32,
            stream: stream as u16,
        }
    }

    /// Two independent standard normals (Box–Muller on one Philox block).
    #[inline]
    pub fn pair(&self, index: u64, lane: u16) -> (f64, f64) {
        let tag = (u32::from(self.stream) << 16) | u32::from(lane);
        let b = self.rng.block([index as u32, (index >> 32) as u32, self.path, tag]);
        let x0 = u64::from(b[0]) | (u64::from(b[1]) << 32);
        let x1 = u64::from(b[2]) | (u64::from(b[3]) << 32);
        // u1 ∈ (0, 1], u2 ∈ [0, 1)
        let u1 = ((x0 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (x1 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }

    /// Fills `out` with standard normals for draw `index`.
    #[inline]
    pub fn fill(&self, index: u64, out: &mut [f64]) {
        let mut lane = 0u16;
        let mut chunks = out.chunks_exact_mut(2);
        for chunk in &mut chunks {
            let (a, b) = self.pair(index, lane);
            chunk[0] = a;
            chunk[1] = b;
            lane += 1;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.pair(index, lane).0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answers() {
        let zero = Philox { key: [0, 0] }.block([0; 4]);
        assert_eq!(zero, [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]);
        let ones = Philox { key: [u32::MAX; 2] }.block([u32::MAX; 4]);
        assert_eq!(ones, [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]);
        let pi = Philox { key: [0xa4093822, 0x299f31d0] }.block([0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344]);
        assert_eq!(pi, [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]);
    }

    #[test]
    fn draws_are_addressable() {
        let s = NormalStream::new(42, 7, Stream::Brownian);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        s.fill(1000, &mut a);
        s.fill(1000, &mut b);
        assert_eq!(a, b);
        s.fill(1001, &mut b);
        assert_ne!(a, b);
        let other_path = NormalStream::new(42, 8, Stream::Brownian);
        other_path.fill(1000, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments() {
        let s = NormalStream::new(1, 0, Stream::Brownian);
        let n = 200_000u64;
        let (mut sum, mut sq, mut quad) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (a, b) = s.pair(i, 0);
            for z in [a, b] {
                sum += z;
                sq += z * z;
                quad += z * z * z * z;
            }
        }
        let count = 2.0 * n as f64;
        let mean = sum / count;
        let var = sq / count;
        // standard errors: mean 1/√N, variance √(2/N), fourth moment √(96/N)
        assert!(mean.abs() < 5.0 / count.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / count).sqrt(), "var {var}");
        assert!((quad / count - 3.0).abs() < 5.0 * (96.0 / count).sqrt());
    }

    #[test]
    fn derived_seeds_differ() {
        let p = Philox::new(99);
        let seeds: std::collections::BTreeSet<_> = (0..100).map(|i| p.derive_seed(i)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
