//! Test-side oracles shared by the integration suites. Nothing here calls
//! into the library's own quadrature or statistics code.
#![allow(dead_code)]

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `β(a,b)` by splitting at 1/2 and straightening both endpoint powers.
pub fn beta_oracle(a: f64, b: f64) -> f64 {
    let left = simpson(|v| (1.0 - v.powf(1.0 / a)).powf(b - 1.0), 0.0, 0.5f64.powf(a), 20_000) / a;
    let right = simpson(|w| (1.0 - w.powf(1.0 / b)).powf(a - 1.0), 0.0, 0.5f64.powf(b), 20_000) / b;
    left + right
}

pub fn c_h_oracle(h: f64) -> f64 {
    (h * (2.0 * h - 1.0) / beta_oracle(2.0 - 2.0 * h, h - 0.5)).sqrt()
}

/// `K^H(t,s)` from its defining integral with `u - s = v^{1/p}`, `p = H - 1/2`.
pub fn kernel_oracle(t: f64, s: f64, h: f64) -> f64 {
    if t <= s {
        return 0.0;
    }
    let p = h - 0.5;
    let top = (t - s).powf(p);
    let i = simpson(|v| (s + v.powf(1.0 / p)).powf(p), 0.0, top, 4000) / p;
    c_h_oracle(h) * s.powf(0.5 - h) * i
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (var(xs) / xs.len() as f64).sqrt())
}

/// fBm covariance `½(t^{2H} + s^{2H} - |t-s|^{2H})`.
pub fn fbm_cov(s: f64, t: f64, h: f64) -> f64 {
    0.5 * (t.powf(2.0 * h) + s.powf(2.0 * h) - (t - s).abs().powf(2.0 * h))
}

/// Sample covariance of columns `i`, `j` (centered) and its standard error.
pub fn cov_se(rows: &[Vec<f64>], i: usize, j: usize) -> (f64, f64) {
    let mi = mean(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
    let mj = mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    let prods: Vec<f64> = rows.iter().map(|r| (r[i] - mi) * (r[j] - mj)).collect();
    mean_se(&prods)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided KS statistic of `xs` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut z = xs.to_vec();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    z.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic two-sided KS critical value at level 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Least-squares slope.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
