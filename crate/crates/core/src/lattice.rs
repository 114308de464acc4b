//! Discretized Wiener process on a uniform time grid.
//!
//! Increments are drawn from a ChaCha20 stream keyed by `(seed, path_id)`
//! with a fixed consumption of four 32-bit words per step, so increment `i`
//! is a pure function of `(seed, path_id, i)` and can be regenerated in any
//! order or in parallel.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Uniform grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    /// Number of steps `n`; the grid has `n + 1` points.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_i`, with `t_n == T` exactly.
    pub fn point(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.point(i)).collect()
    }

    /// Midpoint of step `i`, i.e. of `[t_i, t_{i+1}]`.
    pub fn midpoint(&self, i: usize) -> f64 {
        self.horizon * (i as f64 + 0.5) / self.steps as f64
    }

    /// Grid index of `t`, which must coincide with a grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if !(k >= 0.0 && k <= self.steps as f64) || (x - k).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "time {t} is not a point of the grid (T = {}, n = {})",
                self.horizon, self.steps
            )));
        }
        Ok(k as usize)
    }

    /// Grid with `steps / factor` steps over the same horizon.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by a factor {factor}",
                self.steps
            )));
        }
        TimeGrid::new(self.horizon, self.steps / factor)
    }
}

/// Cameron-Martin shift of the driving path in the direction `1_[a,b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

impl Perturbation {
    pub fn new(a: f64, b: f64, delta: f64) -> Result<Self> {
        if !(a < b) {
            return Err(Error::Domain(format!("perturbation needs a < b, got [{a}, {b}]")));
        }
        Ok(Self { a, b, delta })
    }

    pub fn negated(&self) -> Self {
        Self {
            delta: -self.delta,
            ..*self
        }
    }
}

/// One realization of `W` on a [`TimeGrid`], possibly shifted by a
/// Cameron-Martin direction. The shift is kept separately from the sampled
/// increments so that opposite perturbations cancel exactly.
#[derive(Debug, Clone)]
pub struct WienerLattice {
    grid: TimeGrid,
    seed: u64,
    path_id: u64,
    base: Arc<Vec<f64>>,
    shift: Option<Vec<f64>>,
    increments: Vec<f64>,
}

const WORDS_PER_STEP: u128 = 4;

fn rng_for(seed: u64, path_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(path_id);
    rng
}

/// Box-Muller from two 53-bit uniforms; consumes exactly four words.
fn next_normal(rng: &mut ChaCha20Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Standard normal variate number `step` of stream `(seed, path_id)`.
pub fn normal_at(seed: u64, path_id: u64, step: usize) -> f64 {
    let mut rng = rng_for(seed, path_id);
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    next_normal(&mut rng)
}

impl WienerLattice {
    pub fn generate(grid: TimeGrid, seed: u64, path_id: u64) -> Result<Self> {
        let mut rng = rng_for(seed, path_id);
        let sd = grid.dt().sqrt();
        let base: Vec<f64> = (0..grid.steps()).map(|_| sd * next_normal(&mut rng)).collect();
        Ok(Self::from_increments(grid, seed, path_id, base))
    }

    /// Lattice from explicit increments (used for coarsening and tests).
    pub fn from_increments(grid: TimeGrid, seed: u64, path_id: u64, increments: Vec<f64>) -> Self {
        assert_eq!(increments.len(), grid.steps(), "one increment per step");
        Self {
            grid,
            seed,
            path_id,
            base: Arc::new(increments.clone()),
            shift: None,
            increments,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    /// Effective increments `ΔW_i` (sampled increment plus any shift).
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Cumulative path `W(t_0), ..., W(t_n)` with `W(0) = 0`.
    pub fn path(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for &dw in &self.increments {
            acc += dw;
            out.push(acc);
        }
        out
    }

    /// Steps whose interval `[t_i, t_{i+1}]` lies inside `[a, b]`.
    pub fn steps_within(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let dt = self.grid.dt();
        let lo = ((a / dt) - 1e-9).ceil().max(0.0) as usize;
        let hi = ((b / dt) + 1e-9).floor().min(self.grid.steps() as f64) as usize;
        lo..hi.max(lo)
    }

    /// Shift every increment whose step lies in `[a, b]` by `δ·Δt`.
    pub fn perturb(&self, p: &Perturbation) -> Result<Self> {
        let tol = 1e-12 * self.grid.horizon();
        if p.a < -tol || p.b > self.grid.horizon() + tol || !(p.a < p.b) {
            return Err(Error::Domain(format!(
                "perturbation interval [{}, {}] not inside [0, {}]",
                p.a,
                p.b,
                self.grid.horizon()
            )));
        }
        let mut shift = self
            .shift
            .clone()
            .unwrap_or_else(|| vec![0.0; self.grid.steps()]);
        let h = p.delta * self.grid.dt();
        for i in self.steps_within(p.a, p.b) {
            shift[i] += h;
        }
        let increments = self
            .base
            .iter()
            .zip(&shift)
            .map(|(b, s)| b + s)
            .collect();
        Ok(Self {
            grid: self.grid,
            seed: self.seed,
            path_id: self.path_id,
            base: Arc::clone(&self.base),
            shift: Some(shift),
            increments,
        })
    }

    /// Same Brownian path observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let incs = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().sum())
            .collect();
        Ok(Self::from_increments(grid, self.seed, self.path_id, incs))
    }
}
