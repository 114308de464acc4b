use rayon::prelude::*;
use zqv_transport::lattice::{TimeGrid, WienerLattice};
use zqv_transport::noise::{
    c_h, d_h, hurst_prime, kernel_dkh, kernel_kh, kernel_l, simulate_fbm, simulate_hermite, CirculantFbm,
    HermiteGenerator, HermiteSpec,
};
use zqv_transport::Error;

mod common;
use common::*;

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 1024).unwrap()
}

fn end_values(gen: &HermiteGenerator, seed: u64, paths: u64, idx: &[usize]) -> Vec<Vec<f64>> {
    (0..paths)
        .into_par_iter()
        .map(|id| {
            let z = gen.sample(seed, id).unwrap();
            idx.iter().map(|&k| z.at(k)).collect()
        })
        .collect()
}

#[test]
fn hurst_prime_examples() {
    assert_eq!(hurst_prime(1, 0.7).unwrap(), 0.7);
    assert!((hurst_prime(2, 0.7).unwrap() - 0.85).abs() < 1e-15);
    assert!((hurst_prime(3, 0.55).unwrap() - 0.85).abs() < 1e-15);
    assert!(matches!(hurst_prime(0, 0.7), Err(Error::Domain(_))));
    assert!(matches!(hurst_prime(2, 0.5), Err(Error::Domain(_))));
    assert!(matches!(hurst_prime(2, 1.0), Err(Error::Domain(_))));
    for q in 1..6 {
        for h in [0.55, 0.7, 0.95] {
            let hp = hurst_prime(q, h).unwrap();
            assert!(hp > 1.0 - 0.5 / q as f64 && hp < 1.0);
            assert!(((2.0 * hp - 2.0) * q as f64 - (2.0 * h - 2.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn c_h_matches_beta_quadrature() {
    for h in [0.6, 0.7, 0.75, 0.8, 0.9] {
        let (lib, oracle) = (c_h(h).unwrap(), c_h_oracle(h));
        assert!(lib > 0.0);
        assert!((lib / oracle - 1.0).abs() < 1e-6, "H={h}: {lib} vs {oracle}");
    }
    let sweep: Vec<f64> = (1..=20).map(|i| c_h(0.5 + 0.002 * i as f64).unwrap()).collect();
    assert!(sweep.windows(2).all(|w| w[1] > w[0]));
    assert!(sweep[0] < 0.05);
    assert!(c_h(0.5).is_err() && c_h(1.2).is_err());
}

#[test]
fn kernel_matches_defining_integral() {
    let lib = kernel_kh(1.0, 0.5, 0.75).unwrap();
    let oracle = kernel_oracle(1.0, 0.5, 0.75);
    assert!((lib / oracle - 1.0).abs() < 1e-6, "{lib} vs {oracle}");
    assert_eq!(kernel_kh(0.4, 0.5, 0.7).unwrap(), 0.0);
    assert_eq!(kernel_kh(0.5, 0.5, 0.7).unwrap(), 0.0);
    assert!(matches!(kernel_kh(1.0, 0.0, 0.7), Err(Error::Domain(_))));
}

#[test]
fn kernel_square_integral_is_variance() {
    // s = r^{1/(2-2H)} removes the s^{1-2H} endpoint behaviour of K².
    let (h, t) = (0.7f64, 1.0f64);
    let e = 1.0 / (2.0 - 2.0 * h);
    let top = t.powf(2.0 - 2.0 * h);
    let v = simpson(
        |r: f64| {
            if r == 0.0 {
                // K(t,s) ~ c s^{1/2-H} t^{2H-1}/(2H-1) as s -> 0
                let c = c_h_oracle(h);
                return e * (c * t.powf(2.0 * h - 1.0) / (2.0 * h - 1.0)).powi(2);
            }
            let s = r.powf(e);
            let k = kernel_kh(t, s, h).unwrap();
            k * k * e * r.powf(e - 1.0)
        },
        0.0,
        top,
        2000,
    );
    assert!((v - t.powf(2.0 * h)).abs() < 1e-4, "{v}");
    assert!((d_h(1, h).unwrap() - 1.0).abs() < 1e-4);
}

#[test]
fn kernel_derivative_examples() {
    for &(t, s, h) in &[(1.0, 0.3, 0.7), (0.8, 0.1, 0.6), (1.0, 0.5, 0.85)] {
        let step = 1e-5;
        let fd = (kernel_kh(t + step, s, h).unwrap() - kernel_kh(t - step, s, h).unwrap()) / (2.0 * step);
        let dk = kernel_dkh(t, s, h).unwrap();
        assert!(dk > 0.0);
        assert!((fd / dk - 1.0).abs() < 1e-4, "({t},{s},{h}): {fd} vs {dk}");
    }
    let near = kernel_dkh(1.0, 1.0 - 2f64.powi(-10), 0.7).unwrap();
    let far = kernel_dkh(1.0, 1.0 - 2f64.powi(-5), 0.7).unwrap();
    assert!(near > far);
    assert!(matches!(kernel_dkh(0.5, 0.5, 0.7), Err(Error::Domain(_))));
    assert!(matches!(kernel_dkh(0.5, 0.7, 0.7), Err(Error::Domain(_))));
}

#[test]
fn kernel_l_examples() {
    let s1 = HermiteSpec::fbm(0.7).unwrap();
    assert_eq!(kernel_l(0.5, &[0.6], &s1).unwrap(), 0.0);
    for y in [0.05, 0.3, 0.9] {
        let (l, k) = (kernel_l(1.0, &[y], &s1).unwrap(), kernel_kh(1.0, y, 0.7).unwrap());
        assert!((l - k).abs() < 1e-6 * k.max(1e-3), "y={y}: {l} vs {k}");
    }
    assert!(matches!(kernel_l(1.0, &[0.0], &s1), Err(Error::Domain(_))));

    let s2 = HermiteSpec::new(2, 0.7).unwrap();
    let hp = s2.hurst_prime();
    assert_eq!(kernel_l(0.5, &[0.2, 0.6], &s2).unwrap(), 0.0);
    // Product of two ∂K factors, singular only at u = max(y).
    let (y1, y2) = (0.3f64, 0.6f64);
    let p = hp - 0.5;
    let oracle = simpson(
        |v: f64| {
            let u = y2 + v.powf(1.0 / p);
            let c = c_h_oracle(hp);
            let f1 = c * (y1 / u).powf(0.5 - hp) * (u - y1).powf(hp - 1.5);
            let f2 = c * (y2 / u).powf(0.5 - hp);
            f1 * f2 / p
        },
        0.0,
        (1.0 - y2).powf(p),
        4000,
    );
    let lib = kernel_l(1.0, &[y1, y2], &s2).unwrap();
    assert!((lib / oracle - 1.0).abs() < 1e-6, "{lib} vs {oracle}");
    assert_eq!(kernel_l(1.0, &[y2, y1], &s2).unwrap(), lib);
}

#[test]
fn rosenblatt_normalization() {
    // ∫_0^{u∧v} ∂K(u,y)∂K(v,y) dy = H'(2H'-1)|u-v|^{2H'-2}, so
    // ‖L_1‖² = (H'(2H'-1))^q / (H(2H-1)).
    let spec = HermiteSpec::new(2, 0.7).unwrap();
    let hp = spec.hurst_prime();
    let (u, v) = (0.9f64, 0.5f64);
    let c = c_h_oracle(hp);
    // Split at v/2: y = z^{1/(2-2H')} straightens y^{1-2H'} near 0 and
    // y = v - w^{1/a}, a = H' - 1/2, straightens (v-y)^{H'-3/2}. Both
    // transformed integrands have finite end values, given in closed form.
    let dk = |t: f64, y: f64| c * (y / t).powf(0.5 - hp) * (t - y).powf(hp - 1.5);
    let e = 1.0 / (2.0 - 2.0 * hp);
    let low = simpson(
        |z: f64| {
            if z == 0.0 {
                e * c * c * (u * v).powf(2.0 * hp - 2.0)
            } else {
                let y = z.powf(e);
                dk(u, y) * dk(v, y) * e * z.powf(e - 1.0)
            }
        },
        0.0,
        (0.5 * v).powf(2.0 - 2.0 * hp),
        20_000,
    );
    let a = hp - 0.5;
    let high = simpson(
        |w: f64| {
            if w == 0.0 {
                dk(u, v) * c / a
            } else {
                let y = v - w.powf(1.0 / a);
                dk(u, y) * c * (y / v).powf(0.5 - hp) / a
            }
        },
        0.0,
        (0.5 * v).powf(a),
        20_000,
    );
    let rho = low + high;
    let closed = hp * (2.0 * hp - 1.0) * (u - v).powf(2.0 * hp - 2.0);
    assert!((rho / closed - 1.0).abs() < 2e-3, "{rho} vs {closed}");

    let h = spec.hurst();
    let norm_sq = (hp * (2.0 * hp - 1.0)).powi(2) / (h * (2.0 * h - 1.0));
    let d = spec.d_h();
    assert!(d > 0.0 && spec.c_h() > 0.0);
    assert!((2.0 * norm_sq * d * d - 1.0).abs() < 1e-3);
    assert!(matches!(HermiteGenerator::new(grid(), HermiteSpec::new(3, 0.7).unwrap()), Err(Error::UnsupportedOrder(3))));
}

#[test]
fn q1_reduction_and_start_value() {
    let w = WienerLattice::generate(grid(), 2, 3).unwrap();
    let a = simulate_fbm(&w, 0.7).unwrap();
    let b = simulate_hermite(&w, &HermiteSpec::fbm(0.7).unwrap()).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.at(0), 0.0);
    let r = simulate_hermite(&w, &HermiteSpec::new(2, 0.7).unwrap()).unwrap();
    assert_eq!(r.at(0), 0.0);
    assert_eq!(r.values().len(), 1025);
}

#[test]
fn adaptedness_is_bit_exact() {
    let g = grid();
    let w = WienerLattice::generate(g, 8, 1).unwrap();
    for q in [1, 2] {
        let spec = HermiteSpec::new(q, 0.7).unwrap();
        let full = simulate_hermite(&w, &spec).unwrap();
        for k in [1, 100, 700, 1024] {
            let mut inc = w.increments().to_vec();
            inc[k..].iter_mut().for_each(|x| *x = 0.0);
            let cut = WienerLattice::from_increments(g, 8, 1, inc);
            assert_eq!(simulate_hermite(&cut, &spec).unwrap().at(k), full.at(k), "q={q}, k={k}");
        }
    }
}

#[test]
fn fbm_covariance_at_half_and_one() {
    let gen = HermiteGenerator::fbm(grid(), 0.7).unwrap();
    let rows = end_values(&gen, 11, 10_000, &[512, 1024]);
    let (c, _) = cov_se(&rows, 0, 1);
    assert!((fbm_cov(0.5, 1.0, 0.7) - 0.5).abs() < 1e-15);
    assert!((c / 0.5 - 1.0).abs() < 0.05, "{c}");
}

#[test]
fn kernel_and_circulant_covariances_agree() {
    let g = grid();
    let idx: Vec<usize> = (1..=8).map(|i| i * 128).collect();
    let gen = HermiteGenerator::fbm(g, 0.7).unwrap();
    let circ = CirculantFbm::new(g, 0.7).unwrap();
    let n = 5000;
    let a = end_values(&gen, 21, n, &idx);
    let b: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|id| {
            let v = circ.sample(21, id);
            idx.iter().map(|&k| v[k]).collect()
        })
        .collect();
    for i in 0..8 {
        for j in i..8 {
            let ((ca, sa), (cb, sb)) = (cov_se(&a, i, j), cov_se(&b, i, j));
            let se = (sa * sa + sb * sb).sqrt();
            assert!((ca - cb).abs() < 3.0 * se, "({i},{j}): {ca} vs {cb} (se {se})");
        }
    }
}

#[test]
fn rosenblatt_unit_variance_and_centering() {
    let gen = HermiteGenerator::new(grid(), HermiteSpec::new(2, 0.7).unwrap()).unwrap();
    let z1: Vec<f64> = end_values(&gen, 31, 10_000, &[1024]).into_iter().map(|r| r[0]).collect();
    let (m, se) = mean_se(&z1);
    assert!(m.abs() < 3.0 * se, "mean {m} (se {se})");
    let v = z1.iter().map(|x| x * x).sum::<f64>() / z1.len() as f64;
    assert!((v - 1.0).abs() < 0.05, "Var Z_1 = {v}");
}

#[test]
fn rosenblatt_increment_variance_h06() {
    let gen = HermiteGenerator::new(grid(), HermiteSpec::new(2, 0.6).unwrap()).unwrap();
    let rows = end_values(&gen, 41, 10_000, &[768, 1024]);
    let sq: Vec<f64> = rows.iter().map(|r| (r[1] - r[0]).powi(2)).collect();
    let target = 0.25f64.powf(1.2);
    assert!((target - 0.1895).abs() < 1e-4);
    let m = mean(&sq);
    assert!((m / target - 1.0).abs() < 0.07, "{m} vs {target}");
}

#[test]
fn p_variation_exponent() {
    let g = TimeGrid::new(1.0, 4096).unwrap();
    let h = 0.7;
    let gen = HermiteGenerator::fbm(g, h).unwrap();
    let levels: Vec<u32> = (6..=12).collect();
    let mut sums = vec![0.0; levels.len()];
    for id in 0..100 {
        let z = gen.sample(51, id).unwrap();
        for (slot, &j) in sums.iter_mut().zip(&levels) {
            let stride = 4096 >> j;
            *slot += (0..(1usize << j)).map(|i| (z.at((i + 1) * stride) - z.at(i * stride)).powi(2)).sum::<f64>();
        }
    }
    let x: Vec<f64> = levels.iter().map(|&j| j as f64).collect();
    let y: Vec<f64> = sums.iter().map(|s| s.log2()).collect();
    let est = (1.0 - slope(&x, &y)) / 2.0;
    assert!((est - h).abs() < 0.1, "{est}");
}
