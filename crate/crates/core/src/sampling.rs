//! Seeded random points for the empirical checkers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spaces::{SeqVector, SpaceTag};

/// Default sampling window `1..=32`.
pub const DEFAULT_WINDOW: (i64, i64) = (1, 32);

/// Deterministic sampler: coordinates uniform in `[−1, 1]` on every index
/// of the window. Euclidean spaces clamp the window to `1..=d`.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    lo: i64,
    hi: i64,
}

impl Sampler {
    pub fn new(seed: u64, space: SpaceTag) -> Self {
        Self::with_window(seed, space, DEFAULT_WINDOW)
    }

    pub fn with_window(seed: u64, space: SpaceTag, window: (i64, i64)) -> Self {
        let (lo, hi) = match space {
            SpaceTag::Euclidean { dim } => (1, dim as i64),
            _ => window,
        };
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            lo,
            hi,
        }
    }

    pub fn point(&mut self) -> SeqVector {
        let rng = &mut self.rng;
        SeqVector::from_pairs((self.lo..=self.hi).map(|s| (s, rng.gen_range(-1.0..=1.0))))
    }

    pub fn points(&mut self, count: usize) -> Vec<SeqVector> {
        (0..count).map(|_| self.point()).collect()
    }

    pub fn pairs(&mut self, count: usize) -> Vec<(SeqVector, SeqVector)> {
        (0..count).map(|_| (self.point(), self.point())).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// A random `d×d` operator `U = qqᵀ + P(0.9·M/‖M‖)P` of norm exactly 1
    /// with `Uq = q`, where `P` projects onto `q⊥`; returns `(rows, q)`.
    pub fn forced_eigen_operator(&mut self, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let rng = &mut self.rng;
        let mut q: DVector<f64> = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..=1.0));
        q /= q.norm();
        let m: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..=1.0));
        let top: f64 = m.singular_values().max();
        let m = m * (0.9 / top);
        let p = DMatrix::identity(d, d) - &q * q.transpose();
        let u = &q * q.transpose() + &p * m * &p;
        let rows = (0..d).map(|i| u.row(i).iter().copied().collect()).collect();
        (rows, q.iter().copied().collect())
    }
}
