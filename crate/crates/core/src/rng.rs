//! Counter-based random stream with a portable draw contract.
//!
//! Every draw is a pure function of `(seed, counter)`, so any state can be
//! reproduced from two integers and streams can be split without sharing.
//! The mixer is the splitmix64 finalizer, which is well distributed and
//! identical on every platform we target.

/// Deterministic random stream. Same `(seed, counter)` yields the same draw
/// on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn with_counter(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent stream keyed by `tag`. Used to give each
    /// training step and purpose its own stream so that resuming from a
    /// checkpoint replays the exact same draws.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            seed: mix(self.seed, tag ^ 0xA5A5_5A5A_DEAD_BEEF),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Multiply-shift keeps the mapping exact and
    /// platform independent.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform_int needs n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller (cosine branch), two draws per sample.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
