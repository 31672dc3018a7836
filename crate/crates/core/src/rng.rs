//! Counter-based pseudo-random numbers.
//!
//! Every random quantity in the toolkit (weights, prompt layouts, sampler
//! draws, mitigation noise, forest bootstraps) is a pure function of a
//! `(key, stream, counter)` triple, so results never depend on call order or
//! thread scheduling and can be reproduced from another language.
//!
//! The mixing function is the SplitMix64 finaliser:
//!
//! ```text
//! z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
//! z ^= z >> 27; z *= 0x94D049BB133111EB
//! z ^= z >> 31
//! ```
//!
//! and a draw is `mix(mix(key ^ stream * 0x9E3779B97F4A7C15) + counter * 0xD1B54A32D192ED03)`.

const STREAM_MUL: u64 = 0x9E37_79B9_7F4A_7C15;
const COUNTER_MUL: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One 64-bit draw addressed by `(key, stream, counter)`.
#[inline]
pub fn draw(key: u64, stream: u64, counter: u64) -> u64 {
    let base = mix64(key ^ stream.wrapping_mul(STREAM_MUL));
    mix64(base.wrapping_add(counter.wrapping_mul(COUNTER_MUL)))
}

/// Maps a draw to `[0, 1)` using its top 53 bits.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Largest magnitude [`CounterRng::normal`] can return: the radius at the
/// smallest `u1` of `2^-53`.
pub const NORMAL_BOUND: f64 = 8.5718;

/// The `i`-th normal of a fresh `CounterRng::new(key, stream)`.
pub fn normal_at(key: u64, stream: u64, i: u64) -> f64 {
    let u1 = 1.0 - unit_f64(draw(key, stream, 2 * i));
    let u2 = unit_f64(draw(key, stream, 2 * i + 1));
    box_muller(u1, u2)
}

fn box_muller(u1: f64, u2: f64) -> f64 {
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
}

/// FNV-1a, used to turn string identifiers into stream numbers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sequential cursor over one `(key, stream)` pair.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64, stream: u64) -> Self {
        Self {
            key,
            stream,
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw(self.key, self.stream, self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform in `[lo, hi)`, computed in f64 and rounded once.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = self.next_f64();
        (f64::from(lo) + (f64::from(hi) - f64::from(lo)) * u) as f32
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller, using libm for platform-stable results.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        box_muller(u1, u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_addressable() {
        let mut rng = CounterRng::new(7, 3);
        let seq: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        for (i, v) in seq.iter().enumerate() {
            assert_eq!(*v, draw(7, 3, i as u64));
        }
    }

    #[test]
    fn streams_differ() {
        assert_ne!(draw(1, 0, 0), draw(1, 1, 0));
        assert_ne!(draw(1, 0, 0), draw(2, 0, 0));
    }

    #[test]
    fn splitmix_reference_value() {
        // First output of the reference SplitMix64 seeded with 0.
        assert_eq!(mix64(0x9E37_79B9_7F4A_7C15), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn unit_interval_and_below() {
        let mut rng = CounterRng::new(42, 0);
        for _ in 0..1000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.below(7) < 7);
        }
    }

    #[test]
    fn normal_is_addressable_and_bounded() {
        let mut rng = CounterRng::new(5, 6);
        for i in 0..100 {
            assert_eq!(rng.normal(), normal_at(5, 6, i));
        }
        let smallest = 1.0 / (1u64 << 53) as f64;
        assert!(box_muller(smallest, 0.0) <= NORMAL_BOUND);
        assert!(box_muller(smallest, 0.0) > NORMAL_BOUND - 1e-3);
    }

    #[test]
    fn normal_moments() {
        let mut rng = CounterRng::new(9, 9);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
