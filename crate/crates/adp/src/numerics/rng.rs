//! Counter-based deterministic random streams.
//!
//! Every source of randomness in the crate flows through [`RngStream`], a
//! SplitMix64-style generator whose state is a pure function of
//! `(seed, stream id, counter)`. Independent reproducible sub-streams are
//! derived by hashing, never by sharing state, so ensemble runs, EOT samples,
//! and per-sample attack noise can be fanned out across tasks and still
//! replay bit-identically.

use ndarray::Array1;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; the avalanche behind both output and derivation.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream addressed by `(seed, stream id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    /// Root stream for a seed (stream id 0).
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// Stream addressed by `(seed, stream)`. Streams with distinct ids have
    /// unrelated output sequences.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let key = mix(mix(seed ^ GAMMA).wrapping_add(mix(stream)));
        RngStream {
            seed,
            stream,
            key,
            counter: 0,
        }
    }

    /// Child stream `id` of this stream. Derivation depends only on the
    /// stream's address, not on how much it has been consumed, so the same
    /// child can be re-derived at any time.
    pub fn substream(&self, id: u64) -> Self {
        Self::derive(self.seed, mix(self.stream.wrapping_add(GAMMA)).wrapping_add(id))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a log argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via the Box-Muller cosine branch.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `[0, bound)` by widening multiply.
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. draws from `N(mean, std^2)`; `std = 0` yields the constant
/// vector of `mean`.
pub fn gaussian_sample(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Array1<f64> {
    assert!(std >= 0.0, "gaussian_sample requires std >= 0, got {std}");
    Array1::from_shape_fn(n, |_| mean + std * rng.next_gaussian())
}
