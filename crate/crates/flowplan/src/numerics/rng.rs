//! Counter-based deterministic random numbers.
//!
//! The generator is stateless apart from a counter: the n-th output is a pure
//! function of `(seed, stream, n)`. Identical `(seed, stream)` pairs always
//! reproduce the same sequence, and distinct streams derived from the same
//! seed are statistically independent for our purposes. This is what allows
//! paired experiments to share noise realizations exactly.

const STREAM_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const COUNTER_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// SplitMix64 finalizer: a full-avalanche 64-bit mix.
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over a byte string; used to derive stream ids from labels.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl SeededRng {
    /// Generator for `(seed, stream)`; the sequence is fully determined.
    pub fn new(seed: u64, stream: u64) -> Self {
        SeededRng {
            seed,
            stream,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derives a labeled stream: `stream = hash(label) + index`.
    ///
    /// Labels keep independent uses (shuffling, tube sampling, env noise)
    /// on non-colliding streams without manual bookkeeping.
    pub fn labeled(seed: u64, label: &str, index: u64) -> Self {
        SeededRng::new(seed, hash_str(label).wrapping_add(index.wrapping_mul(STREAM_MIX)))
    }

    /// Raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(
            self.seed
                ^ self.stream.wrapping_mul(STREAM_MIX)
                ^ self.counter.wrapping_mul(COUNTER_MIX),
        );
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; pairs are cached for determinism.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Vector of i.i.d. standard normals.
    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
