use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{TimeGrid, WienerLattice};
use crate::noise::fbm::KernelTable;
use crate::noise::kernels::HermiteSpec;
use crate::quadrature::GaussLegendre;
use statrs::function::beta::{beta, beta_reg};

/// A realization of the driving noise on a time grid.
#[derive(Debug, Clone)]
pub struct NoisePath {
    grid: TimeGrid,
    values: Vec<f64>,
    spec: Option<HermiteSpec>,
    source: Option<Arc<WienerLattice>>,
}

impl NoisePath {
    /// Wraps arbitrary grid values (e.g. a Wiener path or a deterministic
    /// function) as a noise path. `values[0]` must be zero.
    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::Argument(format!(
                "noise path needs {} values, got {}",
                grid.steps() + 1,
                values.len()
            )));
        }
        if values[0] != 0.0 {
            return Err(Error::Argument("noise path must start at 0".into()));
        }
        Ok(Self {
            grid,
            values,
            spec: None,
            source: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spec(&self) -> Option<&HermiteSpec> {
        self.spec.as_ref()
    }

    pub fn source(&self) -> Option<&WienerLattice> {
        self.source.as_deref()
    }

    /// `Z_t` at grid index `k`.
    pub fn at(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// The same path observed on a grid `factor` times coarser. The source
    /// lattice is coarsened alongside (same Brownian path, summed increments).
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let source = match &self.source {
            Some(w) => Some(Arc::new(w.coarsen(factor)?)),
            None => None,
        };
        Ok(Self {
            grid,
            values: self.values.iter().step_by(factor).copied().collect(),
            spec: self.spec,
            source,
        })
    }

    /// `Z_{u,t} = -(Z_t - Z_{t-u})` with `t = t_k`, `u = t_j`.
    pub fn reversed_increment(&self, k: usize, j: usize) -> f64 {
        -(self.values[k] - self.values[k - j])
    }
}

/// Tables for the order-2 chaos on the lattice.
///
/// The simulated value is `E[Z_t | ΔW_0, ..., ΔW_{n-1}]`, the exact
/// conditional expectation of the Hermite process given the lattice. It is
/// `d I_2(P L_t)` where `P` replaces `L_t` by its cell averages, diagonal
/// cells included (their Wick term is `ΔW_i² - Δt`). Writing
/// `L_t(y_1, y_2) = ∫ f(u, y_1) f(u, y_2) du` with `f = ∂₁K^{H'}` gives the
/// increment over cell `c` as
///
/// `Z_{t_{c+1}} - Z_{t_c} = d Σ_g w_{cg} (X_{cg}² - E X_{cg}²)`,
/// `X_{cg} = Σ_{i <= c} F̄_i(u_{cg}) ΔW_i`,
///
/// where `F̄_i(u)` is the average of `f(u, ·)` over `[t_i, t_{i+1}] ∩ [0, u]`.
/// The `u` nodes use `u = t_c + Δt r^{1/p}` with `p = H' - 1/2`, which
/// straightens the `(u - t_c)^p` cusp of the newest terms.
#[derive(Debug)]
pub(crate) struct ChaosTables {
    grid: TimeGrid,
    d_h: f64,
    nodes: usize,
    weights: Vec<f64>,
    /// Per cell `c`: `F̄_i(u_{cg})` laid out `[g][i]` for `i <= c`.
    averages: Vec<Vec<f64>>,
    /// `E X_{cg}²`, indexed `c * nodes + g`.
    wick: Vec<f64>,
}

const CHAOS_NODES: usize = 5;

/// `∫_a^b f(u, y) dy` for `0 <= a < b <= u`, through the regularized
/// incomplete Beta function.
fn kernel_mass(u: f64, a: f64, b: f64, hp: f64, scale: f64) -> f64 {
    let (pa, pb) = (1.5 - hp, hp - 0.5);
    if b <= 0.5 * u {
        scale * (beta_reg(pa, pb, b / u) - beta_reg(pa, pb, a / u))
    } else {
        scale * (beta_reg(pb, pa, (u - a) / u) - beta_reg(pb, pa, (u - b) / u))
    }
}

impl ChaosTables {
    pub(crate) fn new(grid: TimeGrid, spec: &HermiteSpec) -> Self {
        let n = grid.steps();
        let dt = grid.dt();
        let hp = spec.hurst_prime();
        let p = hp - 0.5;
        let full = spec.c_h() * beta(1.5 - hp, hp - 0.5);
        let gl = GaussLegendre::new(CHAOS_NODES);
        let (rs, ws): (Vec<f64>, Vec<f64>) = gl.on(0.0, 1.0).unzip();
        let offsets: Vec<f64> = rs.iter().map(|r| dt * r.powf(1.0 / p)).collect();
        let jac: Vec<f64> = rs
            .iter()
            .zip(&ws)
            .map(|(r, w)| dt * w / p * r.powf(1.0 / p - 1.0))
            .collect();
        let mut weights = Vec::with_capacity(n * CHAOS_NODES);
        let mut averages = Vec::with_capacity(n);
        let mut wick = Vec::with_capacity(n * CHAOS_NODES);
        for c in 0..n {
            let tc = grid.point(c);
            let mut vals = Vec::with_capacity(CHAOS_NODES * (c + 1));
            for g in 0..CHAOS_NODES {
                let u = tc + offsets[g];
                let scale = full * u.powf(hp - 0.5) / dt;
                let start = vals.len();
                vals.extend((0..c).map(|i| kernel_mass(u, grid.point(i), grid.point(i + 1), hp, scale)));
                vals.push(kernel_mass(u, tc, u, hp, scale));
                weights.push(jac[g]);
                wick.push(dt * vals[start..].iter().map(|v| v * v).sum::<f64>());
            }
            averages.push(vals);
        }
        Self {
            grid,
            d_h: spec.d_h(),
            nodes: CHAOS_NODES,
            weights,
            averages,
            wick,
        }
    }

    fn row(&self, c: usize, g: usize) -> &[f64] {
        &self.averages[c][g * (c + 1)..(g + 1) * (c + 1)]
    }

    fn gaussian(&self, c: usize, g: usize, dw: &[f64]) -> f64 {
        self.row(c, g).iter().zip(dw).map(|(a, b)| a * b).sum()
    }

    /// `Z_{t_k}` for every `k`.
    pub(crate) fn simulate(&self, dw: &[f64]) -> Vec<f64> {
        let n = self.grid.steps();
        let mut z = vec![0.0; n + 1];
        for c in 0..n {
            let mut inc = 0.0;
            for g in 0..self.nodes {
                let x = self.gaussian(c, g, &dw[..=c]);
                let idx = c * self.nodes + g;
                inc += self.weights[idx] * (x * x - self.wick[idx]);
            }
            z[c + 1] = z[c] + self.d_h * inc;
        }
        z
    }

    /// Lattice derivatives `rows[k][m] = ∂Z_{t_k}/∂ΔW_m` (zero for `m >= k`).
    pub(crate) fn derivative_rows(&self, dw: &[f64]) -> Vec<Vec<f64>> {
        let n = self.grid.steps();
        let mut rows = vec![vec![0.0; n]; n + 1];
        for c in 0..n {
            let (prev, next) = rows.split_at_mut(c + 1);
            let next = &mut next[0];
            next[..c].copy_from_slice(&prev[c][..c]);
            for g in 0..self.nodes {
                let x = self.gaussian(c, g, &dw[..=c]);
                let coef = 2.0 * self.d_h * self.weights[c * self.nodes + g] * x;
                for (slot, a) in next[..=c].iter_mut().zip(self.row(c, g)) {
                    *slot += coef * a;
                }
            }
        }
        rows
    }

    /// Row `k` alone, without materializing the others.
    pub(crate) fn derivative_row(&self, dw: &[f64], k: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.grid.steps()];
        for c in 0..k {
            for g in 0..self.nodes {
                let x = self.gaussian(c, g, &dw[..=c]);
                let coef = 2.0 * self.d_h * self.weights[c * self.nodes + g] * x;
                for (slot, a) in row[..=c].iter_mut().zip(self.row(c, g)) {
                    *slot += coef * a;
                }
            }
        }
        row
    }

    /// Cell-averaged kernel `P L_{t_k}` as a dense symmetric `k × k` matrix.
    /// `O(k³)`; used by tests only.
    #[cfg(test)]
    pub(crate) fn projected_kernel(&self, k: usize) -> Vec<Vec<f64>> {
        let mut l = vec![vec![0.0; k]; k];
        for c in 0..k {
            for g in 0..self.nodes {
                let w = self.weights[c * self.nodes + g];
                let row = self.row(c, g);
                for i in 0..=c {
                    let wi = w * row[i];
                    for j in 0..=c {
                        l[i][j] += wi * row[j];
                    }
                }
            }
        }
        l
    }

    #[cfg(test)]
    pub(crate) fn d_h(&self) -> f64 {
        self.d_h
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Kernel(KernelTable),
    Chaos(Arc<ChaosTables>),
}

/// Simulator for `Z^{(q,H)}` on a fixed grid, holding the precomputed kernel
/// tables so that many paths can be generated cheaply.
#[derive(Debug, Clone)]
pub struct HermiteGenerator {
    grid: TimeGrid,
    spec: HermiteSpec,
    engine: Engine,
}

impl HermiteGenerator {
    pub fn new(grid: TimeGrid, spec: HermiteSpec) -> Result<Self> {
        let engine = match spec.q() {
            1 => Engine::Kernel(KernelTable::new(grid, spec.hurst())?),
            2 => Engine::Chaos(Arc::new(ChaosTables::new(grid, &spec))),
            q => return Err(Error::UnsupportedOrder(q)),
        };
        Ok(Self { grid, spec, engine })
    }

    pub fn fbm(grid: TimeGrid, hurst: f64) -> Result<Self> {
        Self::new(grid, HermiteSpec::fbm(hurst)?)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn spec(&self) -> &HermiteSpec {
        &self.spec
    }

    pub fn simulate(&self, w: &WienerLattice) -> Result<NoisePath> {
        if w.grid() != &self.grid {
            return Err(Error::Argument("lattice grid differs from generator grid".into()));
        }
        let values = match &self.engine {
            Engine::Kernel(t) => t.apply(w.increments()),
            Engine::Chaos(c) => c.simulate(w.increments()),
        };
        Ok(NoisePath {
            grid: self.grid,
            values,
            spec: Some(self.spec),
            source: Some(Arc::new(w.clone())),
        })
    }

    /// Generates the lattice `(seed, path_id)` and the noise it drives.
    pub fn sample(&self, seed: u64, path_id: u64) -> Result<NoisePath> {
        let w = WienerLattice::generate(self.grid, seed, path_id)?;
        self.simulate(&w)
    }

    /// `rows[k][m] = ∂Z_{t_k}/∂ΔW_m`, the lattice Malliavin derivative of
    /// every grid value. Exact for the discrete sums used by [`simulate`].
    ///
    /// [`simulate`]: HermiteGenerator::simulate
    pub fn derivative_rows(&self, w: &WienerLattice) -> Result<Vec<Vec<f64>>> {
        if w.grid() != &self.grid {
            return Err(Error::Argument("lattice grid differs from generator grid".into()));
        }
        let n = self.grid.steps();
        Ok(match &self.engine {
            Engine::Kernel(t) => (0..=n)
                .map(|k| {
                    let mut r = vec![0.0; n];
                    r[..k].copy_from_slice(t.row(k));
                    r
                })
                .collect(),
            Engine::Chaos(c) => c.derivative_rows(w.increments()),
        })
    }

    /// Derivative row of a single time `t_k`.
    pub fn derivative_row(&self, w: &WienerLattice, k: usize) -> Result<Vec<f64>> {
        match &self.engine {
            Engine::Kernel(t) => {
                let mut r = vec![0.0; self.grid.steps()];
                r[..k].copy_from_slice(t.row(k));
                Ok(r)
            }
            Engine::Chaos(c) => {
                if w.grid() != &self.grid {
                    return Err(Error::Argument("lattice grid differs from generator grid".into()));
                }
                Ok(c.derivative_row(w.increments(), k))
            }
        }
    }
}

/// fBm with Hurst index `hurst` driven by `w` (midpoint kernel sum).
pub fn simulate_fbm(w: &WienerLattice, hurst: f64) -> Result<NoisePath> {
    HermiteGenerator::fbm(*w.grid(), hurst)?.simulate(w)
}

/// Hermite process driven by `w`. `q = 1` reproduces [`simulate_fbm`]
/// exactly; `q = 2` evaluates the lattice conditional expectation of the
/// double Wiener integral.
pub fn simulate_hermite(w: &WienerLattice, spec: &HermiteSpec) -> Result<NoisePath> {
    HermiteGenerator::new(*w.grid(), *spec)?.simulate(w)
}
