//! Malliavin derivatives of the noise, the inverse flow and the transport
//! solution on the Wiener lattice, plus the density diagnostics.
//!
//! The direction `α` is identified with a lattice step: `D_α F` for `α` in
//! step `m` is `∂F/∂ΔW_m`, so that a Cameron-Martin shift by `δ·1_{[a,b]}`
//! changes `F` by `δ ∫_a^b D_α F dα` to first order.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{backward_path, DriftField};
use crate::lattice::{TimeGrid, WienerLattice};
use crate::noise::{kernel_kh, HermiteGenerator, NoisePath};
use crate::quadrature::GaussLegendre;
use crate::stats::{kde, max_cdf_jump, quantile_sorted, silverman_bandwidth, trapezoid};
use crate::transport::InitialDatum;

/// `α ↦ D_α F` as one value per lattice step.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinPath {
    grid: TimeGrid,
    values: Vec<f64>,
    target: String,
    l2_norm_sq: f64,
}

fn norm_sq(values: &[f64], dt: f64) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() * dt
}

impl MalliavinPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>, target: impl Into<String>) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(Error::Argument(format!(
                "derivative has {} values for {} steps",
                values.len(),
                grid.steps()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Malliavin derivative".into()));
        }
        let l2_norm_sq = norm_sq(&values, grid.dt());
        Ok(Self {
            grid,
            values,
            target: target.into(),
            l2_norm_sq,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    /// `∫_0^T (D_α F)² dα`.
    pub fn l2_norm_sq(&self) -> f64 {
        self.l2_norm_sq
    }

    /// Recomputes the norm from `values`.
    pub fn recompute_norm_sq(&self) -> f64 {
        norm_sq(&self.values, self.grid.dt())
    }

    /// `∫_a^b D_α F dα` over the steps inside `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let dt = self.grid.dt();
        let lo = ((a / dt) - 1e-9).ceil().max(0.0) as usize;
        let hi = (((b / dt) + 1e-9).floor() as usize).min(self.values.len());
        self.values[lo.min(hi)..hi].iter().sum::<f64>() * dt
    }

    /// `alpha,value` rows, `alpha` at step midpoints.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,value\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.grid.midpoint(i), v));
        }
        out
    }
}

/// `D_α B^H_t = K^H(t, α)` for `α < t`, zero otherwise.
pub fn dz_fbm(t: f64, alpha: f64, hurst: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("D_α B^H_t needs α > 0, got {alpha}")));
    }
    if alpha >= t {
        crate::noise::hurst_prime(1, hurst)?;
        return Ok(0.0);
    }
    kernel_kh(t, alpha, hurst)
}

/// `D Z_t` on the lattice, exact for the simulator of `generator`.
pub fn dz_path(generator: &HermiteGenerator, w: &WienerLattice, t: f64) -> Result<MalliavinPath> {
    let k = generator.grid().index_of(t)?;
    let row = generator.derivative_row(w, k)?;
    MalliavinPath::new(*generator.grid(), row, format!("Z_{t}"))
}

/// `D_α Z_t` for a single `α`, looked up in the lattice step containing it.
pub fn dz_hermite(generator: &HermiteGenerator, w: &WienerLattice, t: f64, alpha: f64) -> Result<f64> {
    let grid = generator.grid();
    if !(alpha >= 0.0 && alpha <= grid.horizon()) {
        return Err(Error::Domain(format!("α = {alpha} outside [0, {}]", grid.horizon())));
    }
    if alpha >= t {
        return Ok(0.0);
    }
    let m = ((alpha / grid.dt()) as usize).min(grid.steps() - 1);
    Ok(generator.derivative_row(w, grid.index_of(t)?)?[m])
}

/// Column `m` of the lattice derivative rows: `D_α Z_{t_j}` for
/// `j = 0..=k` with `α` in step `m`.
pub fn dz_column(rows: &[Vec<f64>], m: usize, k: usize) -> Vec<f64> {
    rows[..=k].iter().map(|r| r[m]).collect()
}

/// The inverse flow `u ↦ Y_{u,t}(x)` on the grid together with the
/// quantities every derivative formula needs: `β(u) = b'(u, Y_{u,t}(x))`,
/// linearly interpolated between grid points, and `A(u) = ∫_u^t β`.
#[derive(Debug, Clone)]
pub struct FlowDerivative {
    grid: TimeGrid,
    t_index: usize,
    x: f64,
    y: Vec<f64>,
    beta: Vec<f64>,
    a: Vec<f64>,
    // ∫ over cell j of β e^A times the two linear hat functions.
    p: Vec<f64>,
    q: Vec<f64>,
}

impl FlowDerivative {
    pub fn new(b: &DriftField, z: &NoisePath, x: f64, t: f64) -> Result<Self> {
        let grid = *z.grid();
        let k = grid.index_of(t)?;
        let y = backward_path(b, z, x, k);
        let beta = y.iter().enumerate().map(|(j, &yj)| b.b_prime(grid.point(j), yj)).collect();
        Self::from_parts(grid, k, x, y, beta)
    }

    /// From a precomputed inverse flow `y[j] = Y_{t_j,t}(x)` and
    /// `beta[j] = b'(t_j, y[j])`, `j = 0..=t_index`.
    pub fn from_parts(grid: TimeGrid, t_index: usize, x: f64, y: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if y.len() != t_index + 1 || beta.len() != t_index + 1 {
            return Err(Error::State(format!(
                "inverse flow not precomputed on [0, t]: need {} values, got {} and {}",
                t_index + 1,
                y.len(),
                beta.len()
            )));
        }
        let k = t_index;
        let dt = grid.dt();
        let mut a = vec![0.0; k + 1];
        for j in (0..k).rev() {
            a[j] = a[j + 1] + 0.5 * dt * (beta[j] + beta[j + 1]);
        }
        let gl = GaussLegendre::new(6);
        let mut p = vec![0.0; k];
        let mut q = vec![0.0; k];
        for j in 0..k {
            if beta[j] == 0.0 && beta[j + 1] == 0.0 {
                continue;
            }
            for (th, w) in gl.on(0.0, 1.0) {
                let bu = beta[j] * (1.0 - th) + beta[j + 1] * th;
                let au = a[j + 1] + 0.5 * (1.0 - th) * dt * (bu + beta[j + 1]);
                let f = w * dt * bu * au.exp();
                p[j] += f * (1.0 - th);
                q[j] += f * th;
            }
        }
        Ok(Self {
            grid,
            t_index,
            x,
            y,
            beta,
            a,
            p,
            q,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn t_index(&self) -> usize {
        self.t_index
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    /// `Y_{t_j,t}(x)`.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// `b'(t_j, Y_{t_j,t}(x))`.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `A(t_j) = ∫_{t_j}^t β`.
    pub fn exponent(&self) -> &[f64] {
        &self.a
    }

    fn check(&self, dz: &[f64], s: usize) -> Result<()> {
        if dz.len() <= self.t_index {
            return Err(Error::Argument(format!(
                "noise derivative column has {} values, need {}",
                dz.len(),
                self.t_index + 1
            )));
        }
        if s > self.t_index {
            return Err(Error::Argument(format!("s index {s} exceeds t index {}", self.t_index)));
        }
        Ok(())
    }
}

/// `D_α Y_{t_j,t}(x)` for every `j = 0..=k` from the closed form
///
/// `D_α Y_s = g(s) - e^{-A(s)} ∫_s^t β(u) g(u) e^{A(u)} du`,
/// `g(u) = D_α Z_{u,t} = -(D_α Z_t - D_α Z_u)`,
///
/// where `dz[j] = D_α Z_{t_j}` for one fixed `α`.
pub fn dy_closed_form_all(fd: &FlowDerivative, dz: &[f64]) -> Result<Vec<f64>> {
    fd.check(dz, 0)?;
    let k = fd.t_index;
    let g = |j: usize| -(dz[k] - dz[j]);
    let mut out = vec![0.0; k + 1];
    let mut integral = 0.0;
    for j in (0..k).rev() {
        integral += fd.p[j] * g(j) + fd.q[j] * g(j + 1);
        out[j] = g(j) - (-fd.a[j]).exp() * integral;
    }
    Ok(out)
}

/// [`dy_closed_form_all`] at a single `s = t_{s_index}`.
pub fn dy_closed_form(fd: &FlowDerivative, dz: &[f64], s_index: usize) -> Result<f64> {
    fd.check(dz, s_index)?;
    Ok(dy_closed_form_all(fd, dz)?[s_index])
}

/// `α ↦ D_α Y_{s,t}(x)` from the lattice derivative rows of the noise,
/// `rows[j][m] = D_α Z_{t_j}` for `α` in step `m`. Zero for `α >= t`.
pub fn dy_path(fd: &FlowDerivative, rows: &[Vec<f64>], s_index: usize) -> Result<MalliavinPath> {
    let k = fd.t_index;
    if rows.len() <= k {
        return Err(Error::Argument("derivative rows do not reach t".into()));
    }
    let n = fd.grid.steps();
    let mut values = vec![0.0; n];
    for (m, v) in values.iter_mut().enumerate().take(k) {
        *v = dy_closed_form(fd, &dz_column(rows, m, k), s_index)?;
    }
    MalliavinPath::new(
        fd.grid,
        values,
        format!("Y_{{{},{}}}({})", fd.grid.point(s_index), fd.grid.point(k), fd.x),
    )
}

/// Solution of the linear Volterra equation
/// `v(u) = g(u) + ∫_0^u B'(r) v(r) dr` in reversed time `u = t - s`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraSolution {
    /// `values[i] = D_α R_{t,x}(u_i) = D_α Y_{t - u_i, t}(x)`, `i = 0..=k`.
    pub values: Vec<f64>,
    pub substeps: usize,
    /// Largest change at grid points in the last refinement.
    pub change: f64,
}

impl VolterraSolution {
    /// Reindexed to the forward time index `s`.
    pub fn at_s(&self, s_index: usize) -> f64 {
        self.values[self.values.len() - 1 - s_index]
    }
}

fn volterra_sweep(fd: &FlowDerivative, dz: &[f64], substeps: usize) -> Vec<f64> {
    let k = fd.t_index;
    let dt = fd.grid.dt();
    let g = |j: usize| -(dz[k] - dz[j]);
    // V(u) = ∫_0^u B' v in reversed time; dV/du = β (g - V), v = g - V.
    let mut out = Vec::with_capacity(k + 1);
    let mut v = 0.0;
    out.push(g(k));
    let h = dt / substeps as f64;
    for j in (0..k).rev() {
        let (b1, b0) = (fd.beta[j + 1], fd.beta[j]);
        let (g1, g0) = (g(j + 1), g(j));
        let rhs = |sigma: f64, v: f64| {
            let th = sigma / dt;
            (b1 + (b0 - b1) * th) * (g1 + (g0 - g1) * th - v)
        };
        for i in 0..substeps {
            let s0 = i as f64 * h;
            let k1 = rhs(s0, v);
            let k2 = rhs(s0 + 0.5 * h, v + 0.5 * h * k1);
            let k3 = rhs(s0 + 0.5 * h, v + 0.5 * h * k2);
            let k4 = rhs(s0 + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(g0 - v);
    }
    out
}

/// Solves the Volterra equation for `D_α R_{t,x}(u)` through its
/// differential form with RK4, doubling the substeps per cell until the
/// grid values change by at most `tol`.
pub fn dy_integral_eq(fd: &FlowDerivative, dz: &[f64], tol: f64) -> Result<VolterraSolution> {
    fd.check(dz, 0)?;
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {tol}")));
    }
    let mut substeps = 1;
    let mut prev = volterra_sweep(fd, dz, substeps);
    loop {
        let next = volterra_sweep(fd, dz, 2 * substeps);
        substeps *= 2;
        let change = prev.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if change <= tol {
            return Ok(VolterraSolution {
                values: next,
                substeps,
                change,
            });
        }
        if substeps >= 1 << 12 {
            return Err(Error::NonConvergence {
                iterations: substeps,
                residual: change,
            });
        }
        prev = next;
    }
}

/// `D u(t,x) = u_0'(Y_{0,t}(x)) D Y_{0,t}(x)`.
pub fn du_chain(u0: &InitialDatum, y_value: f64, dy: &MalliavinPath) -> MalliavinPath {
    let slope = u0.derivative(y_value);
    let values = dy.values.iter().map(|v| slope * v).collect::<Vec<_>>();
    let l2_norm_sq = norm_sq(&values, dy.grid.dt());
    MalliavinPath {
        grid: dy.grid,
        values,
        target: format!("u0({})", dy.target),
        l2_norm_sq,
    }
}

/// `1 + e^{-A(s)} ∫_s^t β(u) e^{A(u)} du` along the inverse flow.
pub fn bound_bracket(fd: &FlowDerivative, s_index: usize) -> f64 {
    let tail: f64 = (s_index..fd.t_index).map(|j| fd.p[j] + fd.q[j]).sum();
    1.0 + (-fd.a[s_index]).exp() * tail
}

/// `f(x) = -x e^{-2x}`, minimal at `x = 1/2` with `f(1/2) = -e^{-1}/2`.
pub fn bound_f(x: f64) -> f64 {
    -x * (-2.0 * x).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub paths: usize,
    pub s: f64,
    pub t: f64,
    pub x: f64,
    pub sup_b_prime: f64,
    /// `1 - e^{-1}/2`.
    pub universal_floor: f64,
    /// `1 + f(‖b'‖∞ (t - s)) - 1e-6`.
    pub floor: f64,
    pub min_bracket: f64,
    pub max_bracket: f64,
    /// Paths whose bracket is at or below `floor` or `universal_floor`.
    pub violations: usize,
    /// Smallest `e^{-A(s)}`, the factor multiplying `-D_α Z_t` in
    /// `D_α Y_{s,t}` when `α` lies in `(s, t)` and `D_α Z_u` vanishes on it.
    pub min_exp_factor: f64,
    pub pass: bool,
}

impl BoundReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Evaluates [`bound_bracket`] on `paths` independent noise paths.
pub fn bound_report(
    b: &DriftField,
    generator: &HermiteGenerator,
    seed: u64,
    paths: usize,
    s: f64,
    t: f64,
    x: f64,
) -> Result<BoundReport> {
    if paths < 100 {
        return Err(Error::SampleSize { required: 100, got: paths });
    }
    let grid = generator.grid();
    let si = grid.index_of(s)?;
    if si > grid.index_of(t)? {
        return Err(Error::Argument(format!("need s <= t, got s = {s}, t = {t}")));
    }
    let per_path: Vec<(f64, f64)> = (0..paths as u64)
        .into_par_iter()
        .map(|id| {
            let z = generator.sample(seed, id)?;
            let fd = FlowDerivative::new(b, &z, x, t)?;
            Ok((bound_bracket(&fd, si), (-fd.a[si]).exp()))
        })
        .collect::<Result<_>>()?;
    let universal_floor = 1.0 - 0.5 * (-1.0f64).exp();
    let floor = 1.0 + bound_f(b.sup_b_prime() * (t - s)) - 1e-6;
    let violations = per_path
        .iter()
        .filter(|(br, _)| *br <= floor || *br <= universal_floor)
        .count();
    Ok(BoundReport {
        paths,
        s,
        t,
        x,
        sup_b_prime: b.sup_b_prime(),
        universal_floor,
        floor,
        min_bracket: per_path.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        max_bracket: per_path.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        violations,
        min_exp_factor: per_path.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        pass: violations == 0,
    })
}

/// [`bound_report`] as a hard assertion.
pub fn density_bound_check(
    b: &DriftField,
    generator: &HermiteGenerator,
    seed: u64,
    paths: usize,
    s: f64,
    t: f64,
    x: f64,
) -> Result<BoundReport> {
    let r = bound_report(b, generator, seed, paths, s, t, x)?;
    if r.pass {
        Ok(r)
    } else {
        Err(Error::StructuralViolation(format!(
            "bracket at or below its floor on {}/{} paths (min {:.6}, floor {:.6}, universal {:.6})",
            r.violations, r.paths, r.min_bracket, r.floor, r.universal_floor
        )))
    }
}

/// Largest ensemble mean of `‖D Z_{u,t}‖²` over `points × points` grid
/// pairs `u <= t`.
pub fn noise_derivative_bound(generator: &HermiteGenerator, seed: u64, paths: usize, points: usize) -> Result<f64> {
    if paths == 0 || points < 2 {
        return Err(Error::Argument("need paths > 0 and points >= 2".into()));
    }
    let grid = *generator.grid();
    let n = grid.steps();
    let idx: Vec<usize> = (1..=points).map(|i| (i * n) / points).collect();
    let sums = (0..paths as u64)
        .into_par_iter()
        .map(|id| {
            let w = WienerLattice::generate(grid, seed, id)?;
            let rows = generator.derivative_rows(&w)?;
            let mut acc = Vec::with_capacity(points * points);
            for &k in &idx {
                for &j in &idx {
                    let u = if j <= k { k - j } else { continue };
                    let d: Vec<f64> = rows[k].iter().zip(&rows[u]).map(|(a, b)| a - b).collect();
                    acc.push(norm_sq(&d, grid.dt()));
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = sums[0].len();
    Ok((0..m)
        .map(|i| sums.iter().map(|s| s[i]).sum::<f64>() / paths as f64)
        .fold(0.0, f64::max))
}

/// Kernel density estimate and atom check of a scalar sample, together
/// with the per-path squared Malliavin norms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub samples: usize,
    pub bandwidth: f64,
    pub mass: f64,
    pub max_jump: f64,
    pub jump_limit: f64,
    pub min_norm_sq: f64,
    /// Norm quantiles at 1%, 10%, 50%, 90%, 99%.
    pub quantiles: [f64; 5],
    #[serde(skip)]
    pub grid: Vec<f64>,
    #[serde(skip)]
    pub density: Vec<f64>,
    pub pass: bool,
}

impl DensityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn kde_csv(&self) -> String {
        let mut out = String::from("x,density\n");
        for (x, d) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{x},{d}\n"));
        }
        out
    }
}

pub const DENSITY_MIN_SAMPLES: usize = 1000;

/// Gaussian KDE (Silverman bandwidth unless given) on 512 points spanning
/// the sample padded by six bandwidths.
pub fn density_report(samples: &[f64], norms_sq: &[f64], bandwidth: Option<f64>) -> Result<DensityReport> {
    if samples.len() < DENSITY_MIN_SAMPLES {
        return Err(Error::SampleSize {
            required: DENSITY_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    if norms_sq.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Numeric("negative or NaN squared norm".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Argument(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(samples),
    };
    if !(h > 0.0) {
        return Err(Error::Numeric("degenerate sample: zero bandwidth".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * h;
    let grid: Vec<f64> = (0..512).map(|i| lo + (hi - lo) * i as f64 / 511.0).collect();
    let density = kde(samples, h, &grid);
    let mass = trapezoid(&grid, &density);
    let max_jump = max_cdf_jump(samples);
    let jump_limit = 3.0 / (samples.len() as f64).sqrt();
    let mut sorted = norms_sq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min_norm_sq = sorted.first().copied().unwrap_or(f64::NAN);
    let quantiles = [0.01, 0.1, 0.5, 0.9, 0.99].map(|p| quantile_sorted(&sorted, p));
    Ok(DensityReport {
        samples: samples.len(),
        bandwidth: h,
        mass,
        max_jump,
        jump_limit,
        min_norm_sq,
        quantiles,
        pass: (0.99..=1.01).contains(&mass) && max_jump <= jump_limit && min_norm_sq > 0.0,
        grid,
        density,
    })
}

/// `u(t,x)` and `‖D u(t,x)‖²` on one path.
pub fn solution_with_derivative(
    u0: &InitialDatum,
    b: &DriftField,
    generator: &HermiteGenerator,
    w: &WienerLattice,
    t: f64,
    x: f64,
) -> Result<(f64, MalliavinPath)> {
    let z = generator.simulate(w)?;
    let fd = FlowDerivative::new(b, &z, x, t)?;
    let rows = generator.derivative_rows(w)?;
    let dy = dy_path(&fd, &rows, 0)?;
    let y0 = fd.y[0];
    Ok((u0.eval(y0), du_chain(u0, y0, &dy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::backward_flow;
    use crate::lattice::Perturbation;
    use crate::noise::HermiteSpec;

    fn setup(n: usize, q: usize) -> (HermiteGenerator, WienerLattice) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let g = HermiteGenerator::new(grid, HermiteSpec::new(q, 0.7).unwrap()).unwrap();
        (g, WienerLattice::generate(grid, 21, 3).unwrap())
    }

    #[test]
    fn fbm_derivative_domain_and_support() {
        assert!(matches!(dz_fbm(1.0, 0.0, 0.7), Err(Error::Domain(_))));
        assert_eq!(dz_fbm(0.5, 0.7, 0.7).unwrap(), 0.0);
        assert!(dz_fbm(1.0, 0.5, 0.7).unwrap() > 0.0);
    }

    #[test]
    fn zero_drift_derivative_is_noise_increment() {
        let (g, w) = setup(128, 2);
        let z = g.simulate(&w).unwrap();
        let rows = g.derivative_rows(&w).unwrap();
        let fd = FlowDerivative::new(&DriftField::zero(), &z, 0.3, 1.0).unwrap();
        for m in [0, 40, 100] {
            let col = dz_column(&rows, m, 128);
            let dy = dy_closed_form_all(&fd, &col).unwrap();
            let ve = dy_integral_eq(&fd, &col, 1e-12).unwrap();
            for s in 0..=128 {
                assert_eq!(dy[s], -(col[128] - col[s]));
                assert_eq!(ve.at_s(s), dy[s]);
            }
        }
        let p = dy_path(&fd, &rows, 0).unwrap();
        assert!((p.l2_norm_sq() - p.recompute_norm_sq()).abs() < 1e-14);
    }

    #[test]
    fn closed_form_matches_volterra() {
        let (g, w) = setup(128, 1);
        let z = g.simulate(&w).unwrap();
        let rows = g.derivative_rows(&w).unwrap();
        for b in [DriftField::sine(0.8).unwrap(), DriftField::linear(1.0).unwrap()] {
            let fd = FlowDerivative::new(&b, &z, -0.4, 0.75).unwrap();
            for m in [3, 50, 95] {
                let col = dz_column(&rows, m, 96);
                let cf = dy_closed_form_all(&fd, &col).unwrap();
                let ve = dy_integral_eq(&fd, &col, 1e-11).unwrap();
                for s in 0..=96 {
                    assert!((cf[s] - ve.at_s(s)).abs() < 5e-11, "{} m={m} s={s}", b.name());
                }
            }
        }
    }

    #[test]
    fn flow_derivative_needs_precomputed_path() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert!(matches!(
            FlowDerivative::from_parts(grid, 8, 0.0, vec![0.0; 3], vec![0.0; 9]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn adaptedness_is_exact() {
        let (g, w) = setup(64, 1);
        let z = g.simulate(&w).unwrap();
        let rows = g.derivative_rows(&w).unwrap();
        let fd = FlowDerivative::new(&DriftField::sine(0.5).unwrap(), &z, 0.0, 0.5).unwrap();
        let p = dy_path(&fd, &rows, 8).unwrap();
        assert!(p.values()[32..].iter().all(|&v| v == 0.0));
        assert_eq!(dz_hermite(&g, &w, 0.5, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_oracle_for_inverse_flow() {
        let (g, w) = setup(256, 1);
        let b = DriftField::sine(0.5).unwrap();
        let z = g.simulate(&w).unwrap();
        let fd = FlowDerivative::new(&b, &z, 0.2, 1.0).unwrap();
        let rows = g.derivative_rows(&w).unwrap();
        let dy = dy_path(&fd, &rows, 0).unwrap();
        let p = Perturbation::new(0.25, 0.75, 1e-4).unwrap();
        let zp = g.simulate(&w.perturb(&p).unwrap()).unwrap();
        let fdq = (backward_flow(&b, &zp, 0.2, 0.0, 1.0).unwrap() - fd.y()[0]) / 1e-4;
        let exact = dy.integral(0.25, 0.75);
        assert!((fdq - exact).abs() < 0.01 * exact.abs(), "{fdq} vs {exact}");
    }

    #[test]
    fn chain_rule_scaling() {
        let (g, w) = setup(64, 1);
        let z = g.simulate(&w).unwrap();
        let fd = FlowDerivative::new(&DriftField::zero(), &z, 0.0, 1.0).unwrap();
        let dy = dy_path(&fd, &g.derivative_rows(&w).unwrap(), 0).unwrap();
        assert_eq!(du_chain(&InitialDatum::identity(), 0.3, &dy).values(), dy.values());
        let scaled = du_chain(&InitialDatum::affine(-3.0, 1.0).unwrap(), 0.3, &dy);
        assert!((scaled.l2_norm_sq() - 9.0 * dy.l2_norm_sq()).abs() < 1e-12 * dy.l2_norm_sq());
    }

    #[test]
    fn bracket_zero_drift_and_sample_size() {
        let (g, _) = setup(64, 1);
        let r = bound_report(&DriftField::zero(), &g, 1, 100, 0.0, 1.0, 0.0).unwrap();
        assert_eq!((r.min_bracket, r.max_bracket), (1.0, 1.0));
        assert!(r.pass);
        assert!(matches!(
            bound_report(&DriftField::zero(), &g, 1, 10, 0.0, 1.0, 0.0),
            Err(Error::SampleSize { .. })
        ));
    }

    #[test]
    fn density_report_rejects_small_samples() {
        assert!(matches!(density_report(&[0.0; 10], &[1.0; 10], None), Err(Error::SampleSize { .. })));
        let xs: Vec<f64> = (0..2000).map(|i| crate::lattice::normal_at(9, 1, i)).collect();
        let r = density_report(&xs, &vec![1.0; 2000], None).unwrap();
        assert!(r.pass && (r.mass - 1.0).abs() < 1e-3, "{r:?}");
    }
}
