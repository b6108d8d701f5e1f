//! Counter-based deterministic randomness.
//!
//! A single run seed fans out into labeled substreams (environment resets,
//! prior draws, minibatch shuffles, parameter init) keyed by integers such as
//! the update index or per-env episode index. Because every draw is a pure
//! function of `(seed, label, counters…)`, no generator state needs to be
//! carried across checkpoints and changing the number of environments never
//! perturbs another environment's stream.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a substream key. Labels are short static strings; extra integer
/// coordinates (env index, episode index, update, epoch, …) go into `parts`.
pub fn stream_key(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut state = mix(seed);
    for &b in label.as_bytes() {
        state = mix(state ^ u64::from(b));
    }
    for &p in parts {
        state = mix(state ^ p);
    }
    state
}

/// A counter-mode SplitMix64 stream.
#[derive(Clone, Copy, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, label: &str, parts: &[u64]) -> Self {
        Stream {
            key: stream_key(seed, label, parts),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter += 1;
        out
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        // Modulo bias is negligible for the desk-scale n used here.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draws via Box–Muller. Pairs are generated fresh per
    /// call so no spare-value state survives between calls.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            // u1 in (0, 1] so the log is finite.
            let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            out.push(r * theta.cos());
            out.push(r * theta.sin());
        }
        out.truncate(n);
        out
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
