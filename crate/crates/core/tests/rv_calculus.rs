use proptest::prelude::*;
use zqv_transport::calculus::{
    covariation_eps, covariation_window, qv_certificate, symmetric_integral_eps, symmetric_integral_ext,
    Boundary, EpsilonSchedule, Window,
};
use zqv_transport::lattice::{TimeGrid, WienerLattice};
use zqv_transport::noise::{HermiteGenerator, HermiteSpec};
use zqv_transport::Error;

mod common;
use common::*;

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 1024).unwrap()
}

fn fbm_path(id: u64) -> Vec<f64> {
    static GEN: std::sync::OnceLock<HermiteGenerator> = std::sync::OnceLock::new();
    GEN.get_or_init(|| HermiteGenerator::fbm(grid(), 0.7).unwrap())
        .sample(3, id)
        .unwrap()
        .values()
        .to_vec()
}

#[test]
fn constant_integrator_vanishes() {
    let g = grid();
    let x = vec![-1.25; 1025];
    for y in [fbm_path(0), g.points(), vec![7.0; 1025]] {
        for e in [2.0 * g.dt(), 0.125] {
            assert_eq!(symmetric_integral_eps(&g, &y, &x, e, 1.0).unwrap(), 0.0);
            assert_eq!(covariation_eps(&g, &x, &y, e, 1.0).unwrap(), 0.0);
        }
    }
}

#[test]
fn smooth_symmetric_integral() {
    let g = TimeGrid::new(1.0, 4096).unwrap();
    let s = g.points();
    let mut errs = vec![];
    for e in EpsilonSchedule::dyadic(&g, 3, 9).unwrap().values() {
        let i = symmetric_integral_eps(&g, &s, &s, *e, 1.0).unwrap();
        // Interior part against its own closed form.
        let inner = symmetric_integral_ext(&g, &s, &s, *e, 1.0, Window::Interior, Boundary::Frozen).unwrap();
        let exact_inner = 0.5 * ((1.0 - e).powi(2) - e * e);
        assert!((inner - exact_inner).abs() <= 2.0 * g.dt() + 2.0 * e * e, "{inner} vs {exact_inner}");
        errs.push((i - 0.5).abs());
    }
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(*errs.last().unwrap() < 2f64.powi(-9));
}

#[test]
fn unit_integrand_telescopes() {
    let g = grid();
    let ones = vec![1.0; 1025];
    let schedule = EpsilonSchedule::dyadic(&g, 3, 8).unwrap();
    let mut rms = vec![0.0; schedule.len()];
    for id in 0..100 {
        let x = fbm_path(id);
        for (j, &e) in schedule.values().iter().enumerate() {
            let i = symmetric_integral_eps(&g, &ones, &x, e, 1.0).unwrap();
            // frozen extension: window average at T minus window average at 0
            let l = (e / g.dt()).round() as isize;
            let at = |k: isize| x[k.clamp(0, 1024) as usize];
            let upper: f64 = (1024 - l..1024 + l).map(at).sum();
            let lower: f64 = (-l..l).map(at).sum();
            let oracle = (upper - lower) / (2 * l) as f64;
            assert!((i - oracle).abs() < 1e-12 * (1.0 + oracle.abs()));
            rms[j] += (i - (x[1024] - x[0])).powi(2) / 100.0;
        }
    }
    assert!(rms.windows(2).all(|w| w[1] < w[0]), "{rms:?}");
    assert!(rms.last().unwrap().sqrt() < 0.05);
}

#[test]
fn wiener_bracket_is_time() {
    let g = grid();
    let e = 2f64.powi(-7);
    let vals: Vec<f64> = (0..1000)
        .map(|id| {
            let w = WienerLattice::generate(g, 9, id).unwrap().path();
            covariation_eps(&g, &w, &w, e, 1.0).unwrap()
        })
        .collect();
    assert!((mean(&vals) - 1.0).abs() < 0.05, "{}", mean(&vals));
}

#[test]
fn lipschitz_path_bracket_has_rate_eps() {
    let g = grid();
    let x: Vec<f64> = g.points().iter().map(|s| s * s).collect();
    let schedule = EpsilonSchedule::dyadic(&g, 3, 8).unwrap();
    let b: Vec<f64> = schedule.values().iter().map(|&e| covariation_eps(&g, &x, &x, e, 1.0).unwrap()).collect();
    let lx: Vec<f64> = schedule.values().iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    assert!((slope(&lx, &ly) - 1.0).abs() < 0.1, "{b:?}");
    assert!(*b.last().unwrap() < 0.01);
}

#[test]
fn fbm_bracket_slope() {
    let g = grid();
    let schedule = EpsilonSchedule::default_for(&g).unwrap();
    assert_eq!(schedule.len(), 5);
    let paths: Vec<Vec<f64>> = (0..300).map(fbm_path).collect();
    let means: Vec<f64> = schedule
        .values()
        .iter()
        .map(|&e| mean(&paths.iter().map(|x| covariation_eps(&g, x, x, e, 1.0).unwrap()).collect::<Vec<_>>()))
        .collect();
    let lx: Vec<f64> = schedule.values().iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = means.iter().map(|v| v.ln()).collect();
    let s = slope(&lx, &ly);
    assert!((s - 0.4).abs() < 0.1, "{s}");
}

#[test]
fn certificates() {
    let g = grid();
    let schedule = EpsilonSchedule::default_for(&g).unwrap();

    let fbm = HermiteGenerator::fbm(g, 0.75).unwrap();
    let r = qv_certificate(&g, |id| Ok(fbm.sample(5, id)?.values().to_vec()), 0.75, &schedule, 300).unwrap();
    assert!(r.pass && (r.slope.unwrap() - 0.5).abs() < 0.1, "{r:?}");

    let ros = HermiteGenerator::new(g, HermiteSpec::new(2, 0.7).unwrap()).unwrap();
    let r = qv_certificate(&g, |id| Ok(ros.sample(6, id)?.values().to_vec()), 0.7, &schedule, 200).unwrap();
    assert!(r.pass && (r.slope.unwrap() - 0.4).abs() < 0.1, "{r:?}");

    let r = qv_certificate(&g, |id| Ok(WienerLattice::generate(g, 7, id)?.path()), 0.7, &schedule, 300).unwrap();
    assert!(!r.pass);
    assert!(r.slope.unwrap().abs() < 0.05, "{r:?}");
    assert!(r.to_csv().starts_with("eps,mean,stderr\n"));
    assert_eq!(r.to_csv().lines().count(), 6);
    let j: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
    assert_eq!(j["pass"], false);
    assert!((j["target"].as_f64().unwrap() - 0.4).abs() < 1e-15);
}

#[test]
fn certificate_errors() {
    let g = grid();
    let schedule = EpsilonSchedule::default_for(&g).unwrap();
    let gen = |id| Ok(WienerLattice::generate(g, 1, id)?.path());
    assert!(matches!(qv_certificate(&g, gen, 0.7, &schedule, 99), Err(Error::SampleSize { .. })));
    let short = EpsilonSchedule::dyadic(&g, 3, 4).unwrap();
    assert!(matches!(qv_certificate(&g, gen, 0.7, &short, 100), Err(Error::Report(_))));
    let x = vec![0.0; 1025];
    assert!(matches!(covariation_eps(&g, &x, &x, g.dt(), 1.0), Err(Error::Resolution(_))));
    assert!(EpsilonSchedule::new(&g, vec![0.25, 0.125, 0.125]).is_err());
}

#[test]
fn symmetric_integral_is_cauchy_stable() {
    // Y = sin(X) with X of zero quadratic variation; the symmetric integral
    // obeys the classical chain rule, so the limit is cos(X_0) - cos(X_1).
    let g = grid();
    let schedule = EpsilonSchedule::default_for(&g).unwrap();
    let (e1, e2) = (schedule.values()[3], schedule.values()[4]);
    let mut diffs = vec![];
    let mut errs = vec![];
    for id in 0..200 {
        let x = fbm_path(id);
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let a = symmetric_integral_ext(&g, &y, &x, e1, 1.0, Window::Full, Boundary::Reflected).unwrap();
        let b = symmetric_integral_ext(&g, &y, &x, e2, 1.0, Window::Full, Boundary::Reflected).unwrap();
        diffs.push(b - a);
        errs.push(b - (x[0].cos() - x[1024].cos()));
    }
    let (m, se) = mean_se(&diffs);
    assert!(m.abs() < 3.0 * se.max(1e-12), "{m} (se {se})");
    assert!(mean(&errs.iter().map(|e| e.abs()).collect::<Vec<_>>()) < 0.05);
}

fn arb_path() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 65)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariation_is_bilinear(x in arb_path(), y in arb_path(), ka in -4i32..4, kb in -4i32..4, sa in any::<bool>(), a in -5.0f64..5.0) {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let e = 4.0 * g.dt();
        let base = covariation_eps(&g, &x, &y, e, 1.0).unwrap();
        // powers of two scale without rounding
        let (pa, pb) = (if sa { -1.0 } else { 1.0 } * 2f64.powi(ka), 2f64.powi(kb));
        let xs: Vec<f64> = x.iter().map(|v| pa * v).collect();
        let ys: Vec<f64> = y.iter().map(|v| pb * v).collect();
        prop_assert_eq!(covariation_eps(&g, &xs, &ys, e, 1.0).unwrap(), pa * pb * base);
        let xa: Vec<f64> = x.iter().map(|v| a * v).collect();
        let scaled = covariation_eps(&g, &xa, &y, e, 1.0).unwrap();
        let scale = covariation_eps(&g, &xa, &xa, e, 1.0).unwrap().sqrt() * covariation_eps(&g, &y, &y, e, 1.0).unwrap().sqrt();
        prop_assert!((scaled - a * base).abs() <= 1e-13 * (1.0 + scale));
    }

    #[test]
    fn covariation_polarizes(x in arb_path(), y in arb_path(), lag in 2usize..16) {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let e = lag as f64 * g.dt();
        let p: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let m: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let lhs = covariation_window(&g, &x, &y, e, 1.0, Window::Full).unwrap();
        let pp = covariation_eps(&g, &p, &p, e, 1.0).unwrap();
        let mm = covariation_eps(&g, &m, &m, e, 1.0).unwrap();
        prop_assert!((lhs - 0.25 * (pp - mm)).abs() <= 1e-13 * (1.0 + pp + mm));
    }

    #[test]
    fn symmetric_integral_is_linear_in_integrand(x in arb_path(), y in arb_path(), c in -4i32..4) {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let e = 4.0 * g.dt();
        let k = 2f64.powi(c);
        let ys: Vec<f64> = y.iter().map(|v| k * v).collect();
        prop_assert_eq!(
            symmetric_integral_eps(&g, &ys, &x, e, 1.0).unwrap(),
            k * symmetric_integral_eps(&g, &y, &x, e, 1.0).unwrap()
        );
    }
}
