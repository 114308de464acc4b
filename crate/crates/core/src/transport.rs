//! Transport solution by characteristics, `u(t, x) = u_0(Y_{0,t}(x))`, and
//! the term-by-term check of its weak formulation.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::calculus::{symmetric_integral_ext, Boundary, Window};
use crate::error::{Error, Result};
use crate::flow::{backward_flow, backward_path_to, forward_tangent, DriftField};
use crate::noise::{HermiteGenerator, NoisePath};

type Map = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Initial datum `u_0` with derivative, a claimed lower bound
/// `(u_0')² >= C` on `window`, and the range `[inf u_0, sup u_0]`.
#[derive(Clone)]
pub struct InitialDatum {
    name: String,
    u0: Map,
    u0_prime: Map,
    lower_bound_sq_derivative: f64,
    window: (f64, f64),
    range: (f64, f64),
}

impl fmt::Debug for InitialDatum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialDatum")
            .field("name", &self.name)
            .field("C", &self.lower_bound_sq_derivative)
            .field("window", &self.window)
            .finish()
    }
}

fn sample_points(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let (lo, hi) = (lo.max(-50.0), hi.min(50.0));
    (0..=40).map(move |i| lo + (hi - lo) * i as f64 / 40.0)
}

impl InitialDatum {
    pub fn new<U, D>(
        name: &str,
        u0: U,
        u0_prime: D,
        lower_bound_sq_derivative: f64,
        window: (f64, f64),
        range: (f64, f64),
    ) -> Result<Self>
    where
        U: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        const H: f64 = 1e-5;
        if !(lower_bound_sq_derivative >= 0.0) || !(window.0 < window.1) {
            return Err(Error::Argument(format!("initial datum '{name}': invalid C or window")));
        }
        for x in sample_points(window.0, window.1) {
            let fd = (u0(x + H) - u0(x - H)) / (2.0 * H);
            let d = u0_prime(x);
            if (fd - d).abs() > 1e-6 * (1.0 + d.abs()) {
                return Err(Error::Argument(format!(
                    "initial datum '{name}': u0' = {d} but finite difference gives {fd} at x = {x}"
                )));
            }
            if d * d < lower_bound_sq_derivative {
                return Err(Error::Argument(format!(
                    "initial datum '{name}': (u0')² = {} < C = {lower_bound_sq_derivative} at x = {x}",
                    d * d
                )));
            }
            let v = u0(x);
            if v < range.0 || v > range.1 {
                return Err(Error::Argument(format!("initial datum '{name}' leaves its range at x = {x}")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            u0: Arc::new(u0),
            u0_prime: Arc::new(u0_prime),
            lower_bound_sq_derivative,
            window,
            range,
        })
    }

    pub fn identity() -> Self {
        Self::affine(1.0, 0.0).expect("identity is valid")
    }

    /// `u_0(x) = m x + c`, so `(u_0')² = m²` everywhere.
    pub fn affine(slope: f64, intercept: f64) -> Result<Self> {
        let range = if slope == 0.0 {
            (intercept, intercept)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        Self::new(
            &format!("affine({slope}, {intercept})"),
            move |x| slope * x + intercept,
            move |_| slope,
            slope * slope,
            (f64::NEG_INFINITY, f64::INFINITY),
            range,
        )
    }

    /// `u_0 ≡ c`.
    pub fn constant(c: f64) -> Self {
        Self::affine(0.0, c).expect("constants are valid")
    }

    /// Bounded datum `u_0(x) = a tanh(x / a)` with values in `(-a, a)`.
    /// `(u_0')² = sech⁴(x/a) >= C` holds on `|x| <= a·acosh(C^{-1/4})`,
    /// which is the returned window.
    pub fn tanh(a: f64, c: f64) -> Result<Self> {
        if !(a > 0.0) || !(c > 0.0 && c <= 1.0) {
            return Err(Error::Argument(format!("tanh datum needs a > 0 and C in (0, 1], got a = {a}, C = {c}")));
        }
        let half = a * c.powf(-0.25).acosh();
        Self::new(
            &format!("tanh({a}, C = {c})"),
            move |x| a * (x / a).tanh(),
            move |x| {
                let s = 1.0 / (x / a).cosh();
                s * s
            },
            c * (1.0 - 1e-12),
            (-half, half),
            (-a, a),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.u0)(x)
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        (self.u0_prime)(x)
    }

    /// `C` in `(u_0')² >= C`.
    pub fn lower_bound_sq_derivative(&self) -> f64 {
        self.lower_bound_sq_derivative
    }

    /// Interval on which `(u_0')² >= C` is claimed.
    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    /// `(inf u_0, sup u_0)`.
    pub fn range(&self) -> (f64, f64) {
        self.range
    }
}

/// Test function with derivative and compact support.
#[derive(Clone)]
pub struct TestFunction {
    phi: Map,
    phi_prime: Map,
    support: (f64, f64),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("support", &self.support).finish()
    }
}

impl TestFunction {
    pub fn new<P, D>(phi: P, phi_prime: D, support: (f64, f64)) -> Result<Self>
    where
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let (a, b) = support;
        if !(a < b) {
            return Err(Error::Argument(format!("empty support [{a}, {b}]")));
        }
        let w = b - a;
        for x in [a - w, a - 0.01 * w, b + 0.01 * w, b + w] {
            if phi(x) != 0.0 || phi_prime(x) != 0.0 {
                return Err(Error::Argument(format!("test function does not vanish at x = {x}")));
            }
        }
        const H: f64 = 1e-6;
        for i in 1..20 {
            let x = a + w * i as f64 / 20.0;
            let fd = (phi(x + H) - phi(x - H)) / (2.0 * H);
            let d = phi_prime(x);
            if (fd - d).abs() > 1e-5 * (1.0 + d.abs()) {
                return Err(Error::Argument(format!(
                    "test function derivative {d} disagrees with finite difference {fd} at x = {x}"
                )));
            }
        }
        Ok(Self {
            phi: Arc::new(phi),
            phi_prime: Arc::new(phi_prime),
            support,
        })
    }

    /// `φ(x) = exp(-1 / (1 - ((x - c)/r)²))` on `|x - c| < r`, else 0.
    pub fn bump(center: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("bump radius must be positive, got {radius}")));
        }
        let phi = move |x: f64| {
            let z = (x - center) / radius;
            if z.abs() < 1.0 {
                (-1.0 / (1.0 - z * z)).exp()
            } else {
                0.0
            }
        };
        let phi_prime = move |x: f64| {
            let z = (x - center) / radius;
            if z.abs() < 1.0 {
                let q = 1.0 - z * z;
                (-1.0 / q).exp() * (-2.0 * z / (q * q)) / radius
            } else {
                0.0
            }
        };
        Self::new(phi, phi_prime, (center - radius, center + radius))
    }

    #[inline]
    pub fn phi(&self, x: f64) -> f64 {
        (self.phi)(x)
    }

    #[inline]
    pub fn phi_prime(&self, x: f64) -> f64 {
        (self.phi_prime)(x)
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Uniform nodes of spacing `dx` covering the support padded by one cell.
    pub fn padded_nodes(&self, dx: f64) -> Vec<f64> {
        let lo = ((self.support.0 / dx).floor() - 1.0) as i64;
        let hi = ((self.support.1 / dx).ceil() + 1.0) as i64;
        (lo..=hi).map(|i| i as f64 * dx).collect()
    }
}

/// `u(t, x) = u_0(Y_{0,t}(x))`.
pub fn solve_transport(u0: &InitialDatum, b: &DriftField, z: &NoisePath, t: f64, x: f64) -> Result<f64> {
    Ok(u0.eval(backward_flow(b, z, x, 0.0, t)?))
}

/// Inverts `y ↦ X` on one cell from the values and slopes at its ends
/// (cubic Hermite), starting from the secant.
fn hermite_inverse(x: f64, y0: f64, h: f64, v: [f64; 2], d: [f64; 2]) -> f64 {
    let mut th = ((x - v[0]) / (v[1] - v[0])).clamp(0.0, 1.0);
    for _ in 0..20 {
        let (t2, t3) = (th * th, th * th * th);
        let p = (2.0 * t3 - 3.0 * t2 + 1.0) * v[0]
            + (t3 - 2.0 * t2 + th) * h * d[0]
            + (-2.0 * t3 + 3.0 * t2) * v[1]
            + (t3 - t2) * h * d[1];
        let dp = (6.0 * t2 - 6.0 * th) * (v[0] - v[1]) + (3.0 * t2 - 4.0 * th + 1.0) * h * d[0] + (3.0 * t2 - 2.0 * th) * h * d[1];
        let step = (p - x) / dp;
        th = (th - step).clamp(0.0, 1.0);
        if step.abs() < 1e-15 {
            break;
        }
    }
    y0 + th * h
}

/// `Y_{0,t_j}(x_i)` for `j = 0..=k`, as `values[j][i]`.
///
/// The discrete backward recursion is the exact inverse of the forward
/// scheme, so the table is built from forward trajectories on a fine
/// grid of starting points and inverted cell by cell. Points the grid does
/// not bracket fall back to the backward recursion.
pub fn inverse_flow_table(b: &DriftField, z: &NoisePath, k: usize, x_nodes: &[f64]) -> Vec<Vec<f64>> {
    let zv = z.values();
    if b.is_zero() || x_nodes.is_empty() {
        return (0..=k).map(|j| x_nodes.iter().map(|&x| x - (zv[j] - zv[0])).collect()).collect();
    }
    let (xmin, xmax) = x_nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &x| (a.min(x), c.max(x)));
    let spread = zv[..=k].iter().fold(0.0f64, |m, v| m.max((v - zv[0]).abs()));
    let t = z.grid().point(k);
    let drift = if b.sup_b().is_finite() {
        b.sup_b() * t
    } else {
        (xmin.abs().max(xmax.abs()) + spread + 1.0) * ((b.sup_b_prime() * t).exp() - 1.0)
    };
    let dy = 1.0 / 256.0;
    let lo = ((xmin - spread - drift) / dy).floor() - 2.0;
    let hi = ((xmax + spread + drift) / dy).ceil() + 2.0;
    let starts: Vec<f64> = (lo as i64..=hi as i64).map(|i| i as f64 * dy).collect();
    let paths: Vec<(Vec<f64>, Vec<f64>)> = starts.par_iter().map(|&y| forward_tangent(b, z, y, k)).collect();
    let mut column = vec![0.0; starts.len()];
    (0..=k)
        .map(|j| {
            if j == 0 {
                return x_nodes.to_vec();
            }
            for (c, p) in column.iter_mut().zip(&paths) {
                *c = p.0[j];
            }
            x_nodes
                .iter()
                .map(|&x| {
                    let idx = column.partition_point(|&v| v <= x);
                    if idx == 0 || idx == column.len() {
                        return backward_path_to(b, z, x, 0, j)[0];
                    }
                    let m = idx - 1;
                    hermite_inverse(
                        x,
                        starts[m],
                        dy,
                        [column[m], column[m + 1]],
                        [paths[m].1[j], paths[m + 1].1[j]],
                    )
                })
                .collect()
        })
        .collect()
}

/// `u(t_j, x_i) = u_0(Y_{0,t_j}(x_i))` for `j = 0..=k`, as `values[j][i]`.
pub fn solution_table(u0: &InitialDatum, b: &DriftField, z: &NoisePath, k: usize, x_nodes: &[f64]) -> Vec<Vec<f64>> {
    let mut table = inverse_flow_table(b, z, k, x_nodes);
    for row in &mut table {
        for v in row.iter_mut() {
            *v = u0.eval(*v);
        }
    }
    table
}

/// The four right-hand terms of the weak formulation at time `t`:
/// `∫u_0φ`, `∫∫u b φ'`, `∫∫u b' φ` and `∫∫u φ' d°Z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakFormReport {
    pub t: f64,
    pub eps: f64,
    pub dt: f64,
    pub dx: f64,
    pub terms: [f64; 4],
    pub lhs: f64,
    pub residual: f64,
    /// `residual / max(|lhs|, |terms|)`.
    pub relative: f64,
    pub boundary: Boundary,
}

impl WeakFormReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

/// Evaluates both sides of the weak formulation against `φ` on the uniform
/// spatial nodes `x_nodes`, with the `d°Z` term given by the ε-symmetric
/// integral of `s ↦ ∫ u(s,x) φ'(x) dx`.
pub fn weak_form_residual(
    u0: &InitialDatum,
    b: &DriftField,
    z: &NoisePath,
    phi: &TestFunction,
    t: f64,
    eps: f64,
    x_nodes: &[f64],
    boundary: Boundary,
) -> Result<WeakFormReport> {
    if x_nodes.len() < 3 {
        return Err(Error::Argument("need at least 3 spatial nodes".into()));
    }
    let dx = x_nodes[1] - x_nodes[0];
    if x_nodes.windows(2).any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * dx) || !(dx > 0.0) {
        return Err(Error::Argument("spatial nodes must be uniform and increasing".into()));
    }
    let (a, c) = phi.support();
    if a < x_nodes[0] || c > x_nodes[x_nodes.len() - 1] {
        return Err(Error::Domain(format!(
            "test function support [{a}, {c}] exceeds quadrature window [{}, {}]",
            x_nodes[0],
            x_nodes[x_nodes.len() - 1]
        )));
    }
    let grid = *z.grid();
    let k = grid.index_of(t)?;
    // Validate ε before the expensive part.
    crate::calculus::lag_of(&grid, eps)?;
    let table = solution_table(u0, b, z, k, x_nodes);
    let phis: Vec<f64> = x_nodes.iter().map(|&x| phi.phi(x)).collect();
    let dphis: Vec<f64> = x_nodes.iter().map(|&x| phi.phi_prime(x)).collect();
    let space = |f: &dyn Fn(usize) -> f64| trapezoid(&(0..x_nodes.len()).map(f).collect::<Vec<_>>(), dx);
    let mut noise_integrand = Vec::with_capacity(k + 1);
    let mut drift = Vec::with_capacity(k + 1);
    let mut divergence = Vec::with_capacity(k + 1);
    for (j, row) in table.iter().enumerate() {
        let s = grid.point(j);
        noise_integrand.push(space(&|i| row[i] * dphis[i]));
        drift.push(space(&|i| row[i] * b.b(s, x_nodes[i]) * dphis[i]));
        divergence.push(space(&|i| row[i] * b.b_prime(s, x_nodes[i]) * phis[i]));
    }
    let lhs = space(&|i| table[k][i] * phis[i]);
    let initial = space(&|i| u0.eval(x_nodes[i]) * phis[i]);
    let noise_term = if k == 0 {
        0.0
    } else {
        symmetric_integral_ext(&grid, &noise_integrand, z.values(), eps, t, Window::Full, boundary)?
    };
    let terms = [initial, trapezoid(&drift, grid.dt()), trapezoid(&divergence, grid.dt()), noise_term];
    let residual = (lhs - terms.iter().sum::<f64>()).abs();
    let scale = terms.iter().fold(lhs.abs(), |m, v| m.max(v.abs()));
    Ok(WeakFormReport {
        t,
        eps,
        dt: grid.dt(),
        dx,
        terms,
        lhs,
        residual,
        relative: if scale > 0.0 { residual / scale } else { residual },
        boundary,
    })
}

/// Independent samples of `u(t, x)`, one per lattice `path_id` in
/// `0..paths`.
pub fn sample_solution(
    u0: &InitialDatum,
    b: &DriftField,
    generator: &HermiteGenerator,
    t: f64,
    x: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if paths == 0 {
        return Err(Error::Argument("need at least one path".into()));
    }
    (0..paths as u64)
        .into_par_iter()
        .map(|id| solve_transport(u0, b, &generator.sample(seed, id)?, t, x))
        .collect()
}
