//! Kernel-method fBm on a lattice, plus an independent circulant-embedding
//! generator kept for cross-validation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::lattice::{normal_at, TimeGrid, WienerLattice};
use crate::noise::kernels::c_h;
use crate::quadrature::GaussLegendre;

/// Lower-triangular table `K^H(t_k, y_i)` for `i < k`, with `y_i` the step
/// midpoints. Row `k` has `k` entries.
#[derive(Debug, Clone)]
pub struct KernelTable {
    grid: TimeGrid,
    hurst: f64,
    data: Arc<Vec<f64>>,
}

fn row_offset(k: usize) -> usize {
    k * (k.saturating_sub(1)) / 2
}

impl KernelTable {
    /// Builds the table by accumulating cell integrals of
    /// `(u-s)^{H-3/2} u^{H-1/2}` along each column.
    pub fn new(grid: TimeGrid, hurst: f64) -> Result<Self> {
        let c = c_h(hurst)?;
        let n = grid.steps();
        let dt = grid.dt();
        let p = hurst - 0.5;
        let inv_p = 1.0 / p;
        let gl_sing = GaussLegendre::new(10);
        let gl_near = GaussLegendre::new(8);
        let gl_far = GaussLegendre::new(4);
        let mut data = vec![0.0; row_offset(n + 1)];
        for i in 0..n {
            let s = grid.midpoint(i);
            let pref = c * s.powf(0.5 - hurst);
            // [s, t_{i+1}]: remove the endpoint singularity with v = (u-s)^p.
            let top = (0.5 * dt).powf(p);
            let mut acc = inv_p * gl_sing.integrate(|v| (s + v.powf(inv_p)).powf(p), 0.0, top);
            data[row_offset(i + 1) + i] = pref * acc;
            for k in (i + 1)..n {
                let (a, b) = (grid.point(k), grid.point(k + 1));
                let gl = if k <= i + 4 { &gl_near } else { &gl_far };
                acc += gl.integrate(|u| (u - s).powf(p - 1.0) * u.powf(p), a, b);
                data[row_offset(k + 1) + i] = pref * acc;
            }
        }
        Ok(Self {
            grid,
            hurst,
            data: Arc::new(data),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// `K^H(t_k, y_i)` for `i < k`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[row_offset(k)..row_offset(k) + k]
    }

    /// `B^H_{t_k} = Σ_{i<k} K^H(t_k, y_i) ΔW_i` for every `k`.
    pub fn apply(&self, increments: &[f64]) -> Vec<f64> {
        let n = self.grid.steps();
        let mut out = vec![0.0; n + 1];
        for (k, slot) in out.iter_mut().enumerate().skip(1) {
            *slot = self
                .row(k)
                .iter()
                .zip(increments)
                .map(|(a, b)| a * b)
                .sum();
        }
        out
    }
}

/// Midpoint kernel sum for fBm driven by `w`.
pub fn simulate_fbm_values(table: &KernelTable, w: &WienerLattice) -> Result<Vec<f64>> {
    if w.grid() != table.grid() {
        return Err(Error::Argument("lattice grid differs from kernel table grid".into()));
    }
    Ok(table.apply(w.increments()))
}

/// Davies-Harte circulant embedding of the fractional Gaussian noise
/// covariance. Validation oracle only: the samples carry no explicit
/// dependence on a [`WienerLattice`].
#[derive(Debug, Clone)]
pub struct CirculantFbm {
    grid: TimeGrid,
    sqrt_eig: Vec<f64>,
}

const CIRCULANT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl CirculantFbm {
    pub fn new(grid: TimeGrid, hurst: f64) -> Result<Self> {
        if !(hurst > 0.5 && hurst < 1.0) {
            return Err(Error::Domain(format!("H must lie in (1/2,1), got {hurst}")));
        }
        let n = grid.steps();
        let m = 2 * n;
        let scale = grid.dt().powf(2.0 * hurst);
        let gamma = |k: usize| -> f64 {
            let k = k as f64;
            0.5 * scale
                * ((k + 1.0).powf(2.0 * hurst) - 2.0 * k.powf(2.0 * hurst)
                    + (k - 1.0).abs().powf(2.0 * hurst))
        };
        let mut c: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let k = if j <= n { j } else { m - j };
                Complex::new(gamma(k), 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut c);
        let mut sqrt_eig = Vec::with_capacity(m);
        for z in &c {
            if z.re < -1e-10 * scale {
                return Err(Error::Numeric(format!(
                    "circulant embedding has a negative eigenvalue {}",
                    z.re
                )));
            }
            sqrt_eig.push((z.re.max(0.0) / m as f64).sqrt());
        }
        Ok(Self { grid, sqrt_eig })
    }

    /// fBm values on the grid, `values[0] = 0`.
    pub fn sample(&self, seed: u64, path_id: u64) -> Vec<f64> {
        let n = self.grid.steps();
        let m = 2 * n;
        let seed = seed ^ CIRCULANT_STREAM_SALT;
        let mut z: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                Complex::new(normal_at(seed, path_id, 2 * j), normal_at(seed, path_id, 2 * j + 1))
                    * self.sqrt_eig[j]
            })
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut z);
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for v in z.iter().take(n) {
            acc += v.re;
            out.push(acc);
        }
        out
    }
}
