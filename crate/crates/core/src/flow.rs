//! Stochastic characteristics `dX = b(t, X) dt + dZ`.
//!
//! Drift is integrated with the implicit trapezoidal rule, each step solved
//! by Newton's method from a Heun predictor, while the noise enters through
//! its exact grid increments. With this choice the backward recursion is the
//! exact algebraic inverse of the forward one, and its solution is the fixed
//! point of the discrete Picard map for the time-reversed equation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::TimeGrid;
use crate::noise::NoisePath;

type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Drift `b(t, x)` together with `∂_x b` and sup-norm bounds.
#[derive(Clone)]
pub struct DriftField {
    name: String,
    b: Field,
    b_prime: Field,
    sup_b: f64,
    sup_b_prime: f64,
    zero: bool,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField")
            .field("name", &self.name)
            .field("sup_b", &self.sup_b)
            .field("sup_b_prime", &self.sup_b_prime)
            .finish()
    }
}

const SAMPLE_T: [f64; 4] = [0.0, 0.3, 0.7, 1.0];
const SAMPLE_X: [f64; 9] = [-4.0, -2.5, -1.0, -0.3, 0.0, 0.4, 1.1, 2.7, 4.0];

impl DriftField {
    /// Validates `b_prime` against centered differences of `b` and both
    /// functions against the claimed bounds on a fixed sample of `(t, x)`.
    pub fn new<B, D>(name: &str, b: B, b_prime: D, sup_b: f64, sup_b_prime: f64) -> Result<Self>
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        const H: f64 = 1e-5;
        for &t in &SAMPLE_T {
            for &x in &SAMPLE_X {
                let fd = (b(t, x + H) - b(t, x - H)) / (2.0 * H);
                let d = b_prime(t, x);
                if (fd - d).abs() > 1e-6 * (1.0 + d.abs()) {
                    return Err(Error::Argument(format!(
                        "drift '{name}': b' = {d} but finite difference gives {fd} at (t, x) = ({t}, {x})"
                    )));
                }
                if b(t, x).abs() > sup_b * (1.0 + 1e-12) || d.abs() > sup_b_prime * (1.0 + 1e-12) {
                    return Err(Error::Argument(format!(
                        "drift '{name}' exceeds its stated bounds at (t, x) = ({t}, {x})"
                    )));
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            b: Arc::new(b),
            b_prime: Arc::new(b_prime),
            sup_b,
            sup_b_prime,
            zero: false,
        })
    }

    pub fn zero() -> Self {
        Self {
            name: "zero".into(),
            b: Arc::new(|_, _| 0.0),
            b_prime: Arc::new(|_, _| 0.0),
            sup_b: 0.0,
            sup_b_prime: 0.0,
            zero: true,
        }
    }

    /// `b ≡ λ`.
    pub fn constant(lambda: f64) -> Result<Self> {
        Self::new(&format!("constant({lambda})"), move |_, _| lambda, |_, _| 0.0, lambda.abs(), 0.0)
    }

    /// `b(t, x) = -λx`. Unbounded, so `sup_b = ∞`.
    pub fn linear(lambda: f64) -> Result<Self> {
        Self::new(
            &format!("linear({lambda})"),
            move |_, x| -lambda * x,
            move |_, _| -lambda,
            f64::INFINITY,
            lambda.abs(),
        )
    }

    /// `b(t, x) = a sin x`.
    pub fn sine(a: f64) -> Result<Self> {
        Self::new(
            &format!("sine({a})"),
            move |_, x| a * x.sin(),
            move |_, x| a * x.cos(),
            a.abs(),
            a.abs(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn b(&self, t: f64, x: f64) -> f64 {
        (self.b)(t, x)
    }

    #[inline]
    pub fn b_prime(&self, t: f64, x: f64) -> f64 {
        (self.b_prime)(t, x)
    }

    pub fn sup_b(&self) -> f64 {
        self.sup_b
    }

    /// `‖b'‖∞`.
    pub fn sup_b_prime(&self) -> f64 {
        self.sup_b_prime
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// The reversed field `B_t(a, x) = -b(t - a, x)`.
    pub fn reversed(&self, t: f64) -> DriftField {
        let b = Arc::clone(&self.b);
        let bp = Arc::clone(&self.b_prime);
        Self {
            name: format!("reversed({}, t = {t})", self.name),
            b: Arc::new(move |a, x| -b(t - a, x)),
            b_prime: Arc::new(move |a, x| -bp(t - a, x)),
            sup_b: self.sup_b,
            sup_b_prime: self.sup_b_prime,
            zero: self.zero,
        }
    }
}

/// Solves `y + σ·h·b(τ, y) = rhs` by Newton's method from `guess`.
fn implicit_solve(b: &DriftField, tau: f64, sigma_h: f64, rhs: f64, guess: f64) -> f64 {
    let mut y = guess;
    for _ in 0..50 {
        let g = y + sigma_h * b.b(tau, y) - rhs;
        let dg = 1.0 + sigma_h * b.b_prime(tau, y);
        let step = g / dg;
        y -= step;
        if step.abs() <= 4.0 * f64::EPSILON * (1.0 + y.abs()) {
            break;
        }
    }
    y
}

fn indices(grid: &TimeGrid, s: f64, t: f64) -> Result<(usize, usize)> {
    if s > t {
        return Err(Error::Argument(format!("flow needs s <= t, got s = {s}, t = {t}")));
    }
    Ok((grid.index_of(s)?, grid.index_of(t)?))
}

/// Forward flow over grid indices `s..=t`, returning the whole trajectory
/// `X_{s, t_j}(x)` for `j = s..=t`.
pub fn forward_trajectory(b: &DriftField, z: &NoisePath, x: f64, s: usize, t: usize) -> Vec<f64> {
    let grid = z.grid();
    let zv = z.values();
    let dt = grid.dt();
    let mut out = Vec::with_capacity(t - s + 1);
    out.push(x);
    if b.is_zero() {
        out.extend(((s + 1)..=t).map(|k| x + (zv[k] - zv[s])));
        return out;
    }
    let mut xk = x;
    for k in s..t {
        let (tk, tk1) = (grid.point(k), grid.point(k + 1));
        let dz = zv[k + 1] - zv[k];
        let bk = b.b(tk, xk);
        let pred = xk + dt * bk + dz;
        let pred = xk + 0.5 * dt * (bk + b.b(tk1, pred)) + dz;
        xk = implicit_solve(b, tk1, -0.5 * dt, xk + 0.5 * dt * bk + dz, pred);
        out.push(xk);
    }
    out
}

/// [`forward_trajectory`] from index 0 together with the spatial
/// derivative of the discrete map, `(X_{0,t_j}(x), ∂_x X_{0,t_j}(x))`.
pub fn forward_tangent(b: &DriftField, z: &NoisePath, x: f64, t: usize) -> (Vec<f64>, Vec<f64>) {
    let path = forward_trajectory(b, z, x, 0, t);
    let grid = z.grid();
    let h = 0.5 * grid.dt();
    let mut tangent = Vec::with_capacity(t + 1);
    let mut d = 1.0;
    tangent.push(d);
    for k in 0..t {
        if !b.is_zero() {
            d *= (1.0 + h * b.b_prime(grid.point(k), path[k])) / (1.0 - h * b.b_prime(grid.point(k + 1), path[k + 1]));
        }
        tangent.push(d);
    }
    (path, tangent)
}

/// `X_{s,t}(x) = x + ∫_s^t b(u, X_{s,u}(x)) du + Z_t - Z_s`.
pub fn forward_flow(b: &DriftField, z: &NoisePath, x: f64, s: f64, t: f64) -> Result<f64> {
    let (i, k) = indices(z.grid(), s, t)?;
    if i == k {
        return Ok(x);
    }
    Ok(*forward_trajectory(b, z, x, i, k).last().expect("non-empty"))
}

/// Backward flow anchored at grid index `t`: entry `j` is `Y_{t_j, t}(x)`
/// for `j = 0..=t`.
pub fn backward_path(b: &DriftField, z: &NoisePath, x: f64, t: usize) -> Vec<f64> {
    backward_path_to(b, z, x, 0, t)
}

/// As [`backward_path`] but stopping at index `s`; entry `j` is
/// `Y_{t_{s+j}, t}(x)`.
pub fn backward_path_to(b: &DriftField, z: &NoisePath, x: f64, s: usize, t: usize) -> Vec<f64> {
    let grid = z.grid();
    let zv = z.values();
    let dt = grid.dt();
    let mut out = vec![0.0; t - s + 1];
    out[t - s] = x;
    if b.is_zero() {
        for k in s..t {
            out[k - s] = x - (zv[t] - zv[k]);
        }
        return out;
    }
    let mut yk = x;
    for k in (s..t).rev() {
        let (tk, tk1) = (grid.point(k), grid.point(k + 1));
        let dz = zv[k + 1] - zv[k];
        let bk1 = b.b(tk1, yk);
        let pred = yk - dt * bk1 - dz;
        let pred = yk - 0.5 * dt * (bk1 + b.b(tk, pred)) - dz;
        yk = implicit_solve(b, tk, 0.5 * dt, yk - 0.5 * dt * bk1 - dz, pred);
        out[k - s] = yk;
    }
    out
}

/// `Y_{s,t}(x) = x - ∫_s^t b(r, Y_{r,t}(x)) dr - (Z_t - Z_s)`.
pub fn backward_flow(b: &DriftField, z: &NoisePath, x: f64, s: f64, t: f64) -> Result<f64> {
    let (i, k) = indices(z.grid(), s, t)?;
    if i == k {
        return Ok(x);
    }
    Ok(backward_path_to(b, z, x, i, k)[0])
}

/// Starting guess for [`picard_solve_r`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PicardInit {
    /// `R⁽⁰⁾ ≡ x`.
    #[default]
    Constant,
    /// `R⁽⁰⁾(a) = x + Z_{a,t}`.
    NoiseShifted,
}

/// Default Picard tolerance `10⁻¹⁰ (1 + |x|)`.
pub fn default_picard_tol(x: f64) -> f64 {
    1e-10 * (1.0 + x.abs())
}

pub const DEFAULT_PICARD_MAX_ITER: usize = 64;

/// Result of a Picard solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardSolution {
    /// `R_{t,x}(u)`.
    pub value: f64,
    /// Sweeps that changed the iterate by at least `tol`.
    pub iterations: usize,
    /// `R_{t,x}(a_j)` for `a_j = jΔt`, `j = 0..=u/Δt`.
    pub path: Vec<f64>,
}

/// Picard iteration for `R_{t,x}(u) = x + ∫_0^u B_t(a, R(a)) da + Z_{u,t}`
/// with trapezoidal quadrature on the grid. Stops once a sweep changes the
/// iterate by less than `tol` in sup norm.
pub fn picard_solve_r(
    b: &DriftField,
    z: &NoisePath,
    x: f64,
    t: f64,
    u: f64,
    tol: f64,
    max_iter: usize,
    init: PicardInit,
) -> Result<PicardSolution> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {tol}")));
    }
    if u > t {
        return Err(Error::Argument(format!("need u <= t, got u = {u}, t = {t}")));
    }
    let grid = z.grid();
    let k = grid.index_of(t)?;
    let m = grid.index_of(u)?;
    let dt = grid.dt();
    // Z_{a_j,t} = -(Z_t - Z_{t - a_j}).
    let noise: Vec<f64> = (0..=m).map(|j| z.reversed_increment(k, j)).collect();
    let big_b = b.reversed(t);
    let mut r: Vec<f64> = match init {
        PicardInit::Constant => vec![x; m + 1],
        PicardInit::NoiseShifted => noise.iter().map(|n| x + n).collect(),
    };
    let mut next = vec![0.0; m + 1];
    let mut residual = f64::INFINITY;
    for sweep in 0..=max_iter {
        next[0] = x;
        let mut integral = 0.0;
        let mut prev = big_b.b(0.0, r[0]);
        for j in 1..=m {
            let cur = big_b.b(grid.point(j), r[j]);
            integral += 0.5 * dt * (prev + cur);
            prev = cur;
            next[j] = x + integral + noise[j];
        }
        residual = r
            .iter()
            .zip(&next)
            .fold(0.0f64, |acc, (a, c)| acc.max((a - c).abs()));
        std::mem::swap(&mut r, &mut next);
        if residual < tol {
            return Ok(PicardSolution {
                value: r[m],
                iterations: sweep,
                path: r,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Forward or backward flow values on a (time, space) lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// `values[j][i]` is the flow at grid time `t_j` for node `x_nodes[i]`:
/// `X_{anchor, t_j}` (forward) or `Y_{t_j, anchor}` (backward).
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub grid: TimeGrid,
    pub anchor: usize,
    pub x_nodes: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub direction: Direction,
    pub path_id: u64,
}

impl FlowSolution {
    /// Values at the earliest time, i.e. `Y_{0,t}` for a backward solution.
    pub fn at_time_index(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    /// CSV with columns `s, t, x, value, direction, path_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,t,x,value,direction,path_id\n");
        for (j, row) in self.values.iter().enumerate() {
            let (s, t) = match self.direction {
                Direction::Backward => (self.grid.point(j), self.grid.point(self.anchor)),
                Direction::Forward => (self.grid.point(self.anchor), self.grid.point(self.anchor + j)),
            };
            for (x, v) in self.x_nodes.iter().zip(row) {
                out += &format!(
                    "{s:.17e},{t:.17e},{x:.17e},{v:.17e},{},{}\n",
                    self.direction.as_str(),
                    self.path_id
                );
            }
        }
        out
    }
}

/// `Y_{s,t}(x)` for every grid `s <= t` and every node, checking strict
/// monotonicity in `x` at each time.
pub fn inverse_flow_field(b: &DriftField, z: &NoisePath, t: f64, x_nodes: &[f64]) -> Result<FlowSolution> {
    if x_nodes.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("x_nodes must be strictly increasing".into()));
    }
    let grid = *z.grid();
    let k = grid.index_of(t)?;
    let columns: Vec<Vec<f64>> = x_nodes.iter().map(|&x| backward_path(b, z, x, k)).collect();
    let mut values = vec![vec![0.0; x_nodes.len()]; k + 1];
    for (i, col) in columns.iter().enumerate() {
        for j in 0..=k {
            values[j][i] = col[j];
        }
    }
    for (j, row) in values.iter().enumerate() {
        if let Some(i) = row.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::SolverResolution(format!(
                "inverse flow not increasing between x = {} and {} at s = {} (‖b'‖∞·T = {}, Δt = {})",
                x_nodes[i],
                x_nodes[i + 1],
                grid.point(j),
                b.sup_b_prime() * grid.horizon(),
                grid.dt()
            )));
        }
    }
    Ok(FlowSolution {
        grid,
        anchor: k,
        x_nodes: x_nodes.to_vec(),
        values,
        direction: Direction::Backward,
        path_id: z.source().map_or(0, |w| w.path_id()),
    })
}
