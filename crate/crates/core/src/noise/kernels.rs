//! Kernels of the Wiener-integral representation of fBm and of the
//! Hermite processes, and their normalizing constants.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use statrs::function::beta::beta;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_kronrod, tanh_sinh};

fn check_hurst(h: f64) -> Result<()> {
    if h > 0.5 && h < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("H must lie in (1/2,1), got {h}")))
    }
}

/// `H' = 1 + (H - 1)/q`.
pub fn hurst_prime(q: usize, h: f64) -> Result<f64> {
    if q < 1 {
        return Err(Error::Domain("Hermite order q must be >= 1".into()));
    }
    check_hurst(h)?;
    Ok(1.0 + (h - 1.0) / q as f64)
}

/// `c_H = (H(2H-1) / β(2-2H, H-1/2))^{1/2}`.
pub fn c_h(h: f64) -> Result<f64> {
    check_hurst(h)?;
    Ok((h * (2.0 * h - 1.0) / beta(2.0 - 2.0 * h, h - 0.5)).sqrt())
}

/// Parameters of the Hermite process `Z^{(q,H)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteSpec {
    q: usize,
    hurst: f64,
    hurst_prime: f64,
    d_h: f64,
    c_h: f64,
}

impl HermiteSpec {
    /// Validates `(q, H)` and computes `H'`, `c_{H'}` and the unit-variance
    /// constant `d(H)` (numerically, cached per `(q, H)`).
    pub fn new(q: usize, hurst: f64) -> Result<Self> {
        let hp = hurst_prime(q, hurst)?;
        Ok(Self {
            q,
            hurst,
            hurst_prime: hp,
            d_h: d_h(q, hurst)?,
            c_h: c_h(hp)?,
        })
    }

    /// Standard fBm, i.e. `q = 1`.
    pub fn fbm(hurst: f64) -> Result<Self> {
        Self::new(1, hurst)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn hurst_prime(&self) -> f64 {
        self.hurst_prime
    }

    pub fn d_h(&self) -> f64 {
        self.d_h
    }

    /// Kernel constant for the parameter `H'`.
    pub fn c_h(&self) -> f64 {
        self.c_h
    }
}

/// `K^H(t,s) = c_H s^{1/2-H} ∫_s^t (u-s)^{H-3/2} u^{H-1/2} du` for `t > s`,
/// zero for `t <= s`.
pub fn kernel_kh(t: f64, s: f64, h: f64) -> Result<f64> {
    check_hurst(h)?;
    if !(s > 0.0) {
        return Err(Error::Domain(format!("K^H(t,s) needs s > 0, got s = {s}")));
    }
    if t <= s {
        return Ok(0.0);
    }
    let c = c_h(h)?;
    Ok(c * s.powf(0.5 - h) * shifted_power_integral(t, s, h)?)
}

/// `∫_s^t (u-s)^{p-1} u^p du` with `p = H - 1/2`, after `v = (u-s)^p`.
fn shifted_power_integral(t: f64, s: f64, h: f64) -> Result<f64> {
    let p = h - 0.5;
    let inv_p = 1.0 / p;
    let top = (t - s).powf(p);
    let v = gauss_kronrod(|v: f64| (s + v.powf(inv_p)).powf(p), 0.0, top, 1e-15, 1e-13)?;
    Ok(v * inv_p)
}

/// `∂K^H/∂t (t,s) = c_H (s/t)^{1/2-H} (t-s)^{H-3/2}` for `0 < s < t`.
pub fn kernel_dkh(t: f64, s: f64, h: f64) -> Result<f64> {
    check_hurst(h)?;
    if !(s > 0.0 && s < t) {
        return Err(Error::Domain(format!(
            "∂K^H(t,s) needs 0 < s < t, got t = {t}, s = {s}"
        )));
    }
    Ok(c_h(h)? * dkh_unchecked(t, s, h))
}

/// `(s/t)^{1/2-H} (t-s)^{H-3/2}` without the constant.
#[inline]
pub(crate) fn dkh_unchecked(t: f64, s: f64, h: f64) -> f64 {
    (s / t).powf(0.5 - h) * (t - s).powf(h - 1.5)
}

/// Hermite kernel `L_t(y_1..y_q) = 1_{max y <= t} ∫_{max y}^t Π_j ∂₁K^{H'}(u, y_j) du`.
///
/// Returns `+∞` when the maximum is attained by two or more coordinates and
/// `q >= 2` (the kernel is not integrable on diagonals).
pub fn kernel_l(t: f64, y: &[f64], spec: &HermiteSpec) -> Result<f64> {
    if y.len() != spec.q() {
        return Err(Error::Argument(format!(
            "kernel_l expects {} coordinates, got {}",
            spec.q(),
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("kernel_l needs y_i > 0, got {bad}")));
    }
    kernel_l_raw(t, y, spec.hurst_prime(), spec.c_h())
}

fn kernel_l_raw(t: f64, y: &[f64], hp: f64, c: f64) -> Result<f64> {
    let (imax, m) = y
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("q >= 1");
    if m >= t {
        return Ok(0.0);
    }
    if y.len() >= 2 && y.iter().enumerate().any(|(j, v)| j != imax && *v == m) {
        return Ok(f64::INFINITY);
    }
    let p = hp - 0.5;
    let inv_p = 1.0 / p;
    let others: Vec<f64> = y
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != imax)
        .map(|(_, v)| *v)
        .collect();
    let integrand = |v: f64| -> f64 {
        let u = m + v.powf(inv_p);
        let mut acc = inv_p * c * (m / u).powf(0.5 - hp);
        for &yj in &others {
            acc *= c * dkh_unchecked(u, yj, hp);
        }
        acc
    };
    let top = (t - m).powf(p);
    // Break points where the nearly singular factors of the other
    // coordinates change scale.
    let mut cuts: Vec<f64> = others
        .iter()
        .map(|yj| (m - yj).powf(p))
        .filter(|v| *v < top)
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut lo = 0.0;
    let mut total = 0.0;
    for hi in cuts.into_iter().chain(std::iter::once(top)) {
        if hi > lo {
            total += gauss_kronrod(&integrand, lo, hi, 1e-300, 1e-12)?;
            lo = hi;
        }
    }
    Ok(total)
}

fn d_h_cache() -> &'static Mutex<HashMap<(usize, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Normalizing constant `d(H)` making `E[(Z_1^{(q,H)})²] = 1`, computed as
/// `(q! ‖L_1‖²_{L²([0,1]^q)})^{-1/2}` by quadrature.
///
/// For `q = 1` this is `∫_0^1 K^H(1,s)² ds`. For `q >= 2` Fubini gives
/// `‖L_1‖² = ∫∫ ρ(u,v)^q du dv` with `ρ(u,v) = ∫_0^{u∧v} ∂₁K(u,y) ∂₁K(v,y) dy`,
/// and the scaling `ρ(λu,λv) = λ^{2H'-2} ρ(u,v)` folds it to a single
/// integral `H^{-1} ∫_0^1 ρ(r,1)^q dr`.
pub fn d_h(q: usize, h: f64) -> Result<f64> {
    let hp = hurst_prime(q, h)?;
    let key = (q, h.to_bits());
    if let Some(v) = d_h_cache().lock().expect("d_h cache").get(&key) {
        return Ok(*v);
    }
    let c = c_h(hp)?;
    let norm_sq = match q {
        1 => tanh_sinh(
            |_, s, _| {
                let k = c * s.powf(0.5 - hp) * shifted_power_integral(1.0, s, hp).unwrap_or(f64::NAN);
                k * k
            },
            0.0,
            1.0,
            1e-10,
        )?,
        _ => fubini_norm_sq(q, h, hp, c)?,
    };
    if !(norm_sq.is_finite() && norm_sq > 0.0) {
        return Err(Error::Numeric(format!(
            "d(H) quadrature failed for q = {q}, H = {h}: ‖L‖² = {norm_sq}"
        )));
    }
    let fact: f64 = (1..=q).map(|k| k as f64).product();
    let d = (fact * norm_sq).powf(-0.5);
    d_h_cache().lock().expect("d_h cache").insert(key, d);
    Ok(d)
}

fn fubini_norm_sq(q: usize, h: f64, hp: f64, c: f64) -> Result<f64> {
    let total = tanh_sinh(
        |r, _, gap| rho_to_one(r, gap, hp, c).map(|v| v.powi(q as i32)).unwrap_or(f64::NAN),
        0.0,
        1.0,
        1e-10,
    )?;
    Ok(total / h)
}

/// `ρ(r, 1) = c² ∫_0^1 s^{1-2H'} (1-s)^{H'-3/2} (1-rs)^{H'-3/2} ds` with
/// `gap = 1 - r`. In `w = 1 - s` the last factor is `(gap + r w)^{H'-3/2}`,
/// so the range is split on a geometric ladder starting at `gap`.
fn rho_to_one(r: f64, gap: f64, hp: f64, c: f64) -> Result<f64> {
    let f = |w: f64, one_minus_w: f64| {
        one_minus_w.powf(1.0 - 2.0 * hp) * w.powf(hp - 1.5) * (gap + r * w).powf(hp - 1.5)
    };
    let mut total = 0.0;
    let mut lo = 0.0;
    let mut hi = gap.min(1.0);
    loop {
        total += tanh_sinh(|_, wl, wr| f(lo + wl, (1.0 - hi) + wr), lo, hi, 1e-12)?;
        if hi >= 1.0 {
            break;
        }
        lo = hi;
        hi = if hi * 8.0 >= 0.5 { 1.0 } else { hi * 8.0 };
    }
    Ok(c * c * total)
}
