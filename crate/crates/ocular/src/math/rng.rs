//! Deterministic random streams.
//!
//! Every stochastic component in the crate draws from [`RngStream`], a
//! splitmix64 counter generator. The generator is a few lines, has no state
//! beyond one u64, and produces identical sequences on every platform, which
//! is what makes dataset generation, planning, and the acceptance suite
//! bit-reproducible. Normal deviates come from the Box-Muller transform.
//!
//! Parallel work never shares a stream: each work item derives its own
//! substream from `(seed, index)`, so results are independent of scheduling.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer: bijective avalanche mix of a 64-bit word.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based splitmix64 stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { state: seed }
    }

    /// Stream for work item `index` under `seed`. Distinct indices give
    /// decorrelated streams; the mapping is pure, so any scheduling order
    /// reproduces the same draws.
    pub fn substream(seed: u64, index: u64) -> Self {
        RngStream::new(seed ^ mix64(index.wrapping_add(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where a logarithm must stay finite.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One Box-Muller pair of independent standard normals.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        (r * t.cos(), r * t.sin())
    }

    /// Four independent standard normals (two Box-Muller pairs).
    pub fn normals4(&mut self) -> [f64; 4] {
        let (a, b) = self.next_normal_pair();
        let (c, d) = self.next_normal_pair();
        [a, b, c, d]
    }

    /// Uniform integer in [0, n). `n` must be nonzero. The modulo bias at
    /// n << 2^64 is far below anything observable here; determinism is what
    /// matters.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
