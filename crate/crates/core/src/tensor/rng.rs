use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based random engine owned by a run. Normal draws use the
/// Box–Muller transform so that the stream of samples depends only on the
/// seed, the stream id and the number of draws.
#[derive(Debug, Clone)]
pub struct SeededEngine {
    rng: ChaCha8Rng,
    spare_normal: Option<f32>,
}

impl SeededEngine {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// An independent engine for `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare_normal: None }
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.rng.random::<f32>()
    }

    pub fn unit_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// One draw from N(0, 1).
    pub fn standard_normal(&mut self) -> f32 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some((radius * theta.sin()) as f32);
        (radius * theta.cos()) as f32
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| std * self.standard_normal()).collect()
    }

    /// Index drawn from the categorical distribution `probs` (need not be
    /// exactly normalized).
    pub fn categorical(&mut self, probs: &[f32]) -> usize {
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        let mut target = self.unit_f64() * total;
        for (i, &p) in probs.iter().enumerate() {
            target -= p as f64;
            if target < 0.0 {
                return i;
            }
        }
        // Rounding left a sliver of mass; take the last nonzero entry.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}
