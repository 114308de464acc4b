//! ε-regularized stochastic calculus: symmetric integrals, covariations and
//! the zero quadratic variation certificate.
//!
//! Paths are arrays of grid values `X(t_0), ..., X(t_n)`. Outside `[0, T]`
//! a path is frozen at its end values unless [`Boundary::Reflected`] is
//! requested. Every `ε` must be an integer multiple `ℓ·Δt` with `ℓ >= 2`, so
//! difference quotients never interpolate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::TimeGrid;

/// Decreasing list of regularization scales, each a multiple of `Δt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSchedule {
    values: Vec<f64>,
}

impl EpsilonSchedule {
    pub fn new(grid: &TimeGrid, values: Vec<f64>) -> Result<Self> {
        for &e in &values {
            lag_of(grid, e)?;
        }
        if values.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Argument("ε schedule must be strictly decreasing".into()));
        }
        if values.is_empty() {
            return Err(Error::Argument("ε schedule is empty".into()));
        }
        Ok(Self { values })
    }

    /// `T·2^{-first}, ..., T·2^{-last}`.
    pub fn dyadic(grid: &TimeGrid, first: u32, last: u32) -> Result<Self> {
        if first > last {
            return Err(Error::Argument(format!("empty dyadic range 2^-{first}..2^-{last}")));
        }
        let values = (first..=last)
            .map(|k| grid.horizon() * 0.5f64.powi(k as i32))
            .collect();
        Self::new(grid, values)
    }

    /// The default `T·2^{-3}, ..., T·2^{-7}`.
    pub fn default_for(grid: &TimeGrid) -> Result<Self> {
        Self::dyadic(grid, 3, 7)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `ε / Δt` as an integer lag, enforcing `ε >= 2Δt`.
pub fn lag_of(grid: &TimeGrid, eps: f64) -> Result<usize> {
    let x = eps / grid.dt();
    let l = x.round();
    if !(x >= 2.0 - 1e-9) {
        return Err(Error::Resolution(format!(
            "ε = {eps} is below 2Δt = {}",
            2.0 * grid.dt()
        )));
    }
    if (x - l).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "ε = {eps} is not a multiple of Δt = {}",
            grid.dt()
        )));
    }
    Ok(l as usize)
}

fn check_len(grid: &TimeGrid, v: &[f64], what: &str) -> Result<()> {
    if v.len() != grid.steps() + 1 {
        return Err(Error::Argument(format!(
            "{what} has {} values, grid needs {}",
            v.len(),
            grid.steps() + 1
        )));
    }
    Ok(())
}

#[inline]
fn frozen(x: &[f64], i: isize) -> f64 {
    x[i.clamp(0, x.len() as isize - 1) as usize]
}

/// Extension of a path beyond the sampled horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// `X_s = X_0` for `s < 0` and `X_s = X_T` for `s > T`.
    #[default]
    Frozen,
    /// Odd reflection `X_{-r} = 2X_0 - X_r`, `X_{T+r} = 2X_T - X_{T-r}`.
    /// Averages of the extension over `[T-ε, T+ε]` then equal `X_T`
    /// exactly, which removes the `O(ε^H)` end bias of the frozen rule.
    Reflected,
}

#[inline]
fn extended(x: &[f64], i: isize, boundary: Boundary) -> f64 {
    let last = x.len() as isize - 1;
    match boundary {
        Boundary::Frozen => frozen(x, i),
        Boundary::Reflected if i < 0 => 2.0 * x[0] - x[(-i).min(last) as usize],
        Boundary::Reflected if i > last => 2.0 * x[last as usize] - x[(2 * last - i).max(0) as usize],
        Boundary::Reflected => x[i as usize],
    }
}

/// Index range of the integration window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// `[0, t]`, relying on the frozen extension beyond the horizon.
    Full,
    /// `[ε, t - ε]`, which never reads outside the data on the left.
    Interior,
}

fn window(k: usize, lag: usize, w: Window) -> std::ops::Range<usize> {
    match w {
        Window::Full => 0..k,
        Window::Interior => lag.min(k)..k.saturating_sub(lag).max(lag.min(k)),
    }
}

/// `I⁰(ε, Y, dX)(t) = ∫_0^t Y_s (X_{s+ε} - X_{s-ε}) / (2ε) ds`, left Riemann
/// sum with step `Δt`.
pub fn symmetric_integral_eps(grid: &TimeGrid, y: &[f64], x: &[f64], eps: f64, t: f64) -> Result<f64> {
    symmetric_integral_window(grid, y, x, eps, t, Window::Full)
}

pub fn symmetric_integral_window(
    grid: &TimeGrid,
    y: &[f64],
    x: &[f64],
    eps: f64,
    t: f64,
    w: Window,
) -> Result<f64> {
    symmetric_integral_ext(grid, y, x, eps, t, w, Boundary::Frozen)
}

/// Symmetric integral with an explicit window and boundary extension. `Y`
/// only needs values on `[0, t]`, i.e. `y.len() > t/Δt`.
pub fn symmetric_integral_ext(
    grid: &TimeGrid,
    y: &[f64],
    x: &[f64],
    eps: f64,
    t: f64,
    w: Window,
    boundary: Boundary,
) -> Result<f64> {
    check_len(grid, x, "X")?;
    let l = lag_of(grid, eps)? as isize;
    let k = grid.index_of(t)?;
    if y.len() <= k {
        return Err(Error::Argument(format!("Y has {} values, need {}", y.len(), k + 1)));
    }
    let mut acc = 0.0;
    for i in window(k, l as usize, w) {
        let ii = i as isize;
        acc += y[i] * (extended(x, ii + l, boundary) - extended(x, ii - l, boundary));
    }
    Ok(acc * grid.dt() / (2.0 * eps))
}

/// `[X, Y]_{ε,t} = (1/ε) ∫_0^t (X_{s+ε} - X_s)(Y_{s+ε} - Y_s) ds`.
pub fn covariation_eps(grid: &TimeGrid, x: &[f64], y: &[f64], eps: f64, t: f64) -> Result<f64> {
    covariation_window(grid, x, y, eps, t, Window::Full)
}

pub fn covariation_window(
    grid: &TimeGrid,
    x: &[f64],
    y: &[f64],
    eps: f64,
    t: f64,
    w: Window,
) -> Result<f64> {
    check_len(grid, x, "X")?;
    check_len(grid, y, "Y")?;
    let l = lag_of(grid, eps)? as isize;
    let k = grid.index_of(t)?;
    let mut acc = 0.0;
    for i in window(k, l as usize, w) {
        let ii = i as isize;
        acc += (frozen(x, ii + l) - x[i]) * (frozen(y, ii + l) - y[i]);
    }
    Ok(acc * grid.dt() / eps)
}

/// Per-ε ensemble statistics of `[X, X]_{ε,T}` with a log-log fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QVReport {
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub paths: usize,
    /// OLS slope of `ln mean` against `ln ε`; `None` with fewer than 3 scales.
    pub slope: Option<f64>,
    pub target: f64,
    pub pass: bool,
}

impl QVReport {
    /// CSV with columns `eps, mean, stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,mean,stderr\n");
        for i in 0..self.eps.len() {
            out += &format!("{:.17e},{:.17e},{:.17e}\n", self.eps[i], self.mean[i], self.stderr[i]);
        }
        out
    }

    /// One-line `{slope, target, pass}`.
    pub fn summary_json(&self) -> String {
        serde_json::json!({ "slope": self.slope, "target": self.target, "pass": self.pass }).to_string()
    }
}

/// Ordinary least squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Builds a [`QVReport`] from per-path brackets `brackets[path][ε]`.
pub fn qv_report(schedule: &EpsilonSchedule, brackets: &[Vec<f64>], hurst: f64) -> Result<QVReport> {
    let m = schedule.len();
    let paths = brackets.len();
    if paths < 2 {
        return Err(Error::Report("need at least two paths for standard errors".into()));
    }
    let mut mean = vec![0.0; m];
    let mut sq = vec![0.0; m];
    for row in brackets {
        for j in 0..m {
            mean[j] += row[j];
            sq[j] += row[j] * row[j];
        }
    }
    let nf = paths as f64;
    let stderr = (0..m)
        .map(|j| {
            mean[j] /= nf;
            let var = (sq[j] / nf - mean[j] * mean[j]).max(0.0) * nf / (nf - 1.0);
            (var / nf).sqrt()
        })
        .collect();
    let target = 2.0 * hurst - 1.0;
    let slope = if m >= 3 {
        let lx: Vec<f64> = schedule.values().iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = mean.iter().map(|v| v.ln()).collect();
        ols_slope(&lx, &ly)
    } else {
        None
    };
    let decreasing = mean[m - 1] < mean[0];
    let pass = slope.is_some_and(|s| (s - target).abs() <= 0.1) && decreasing;
    Ok(QVReport {
        eps: schedule.values().to_vec(),
        mean,
        stderr,
        paths,
        slope,
        target,
        pass,
    })
}

/// Monte Carlo certificate that `X` has zero quadratic variation at rate
/// `ε^{2H-1}`. `generator(path_id)` returns the grid values of one path.
pub fn qv_certificate<F>(
    grid: &TimeGrid,
    generator: F,
    hurst: f64,
    schedule: &EpsilonSchedule,
    paths: usize,
) -> Result<QVReport>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    if paths < 100 {
        return Err(Error::SampleSize { required: 100, got: paths });
    }
    if schedule.len() < 3 {
        return Err(Error::Report(format!(
            "slope fit needs at least 3 ε values, got {}",
            schedule.len()
        )));
    }
    let t = grid.horizon();
    let brackets = (0..paths as u64)
        .into_par_iter()
        .map(|id| {
            let x = generator(id)?;
            schedule
                .values()
                .iter()
                .map(|&e| covariation_eps(grid, &x, &x, e, t))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    qv_report(schedule, &brackets, hurst)
}
