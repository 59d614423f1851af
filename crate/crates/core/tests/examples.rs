//! Worked examples for each module, checked against closed forms or
//! independent oracles written here.

use std::collections::BTreeMap;

use approx::assert_relative_eq;
use statrs::distribution::{ContinuousCDF, Normal};
use walkdiff_core::convergence::{
    ks_statistic, lln_experiment, reference_marginal, stopping_time_drift, ArraySpec, EulerConfig, ReferenceMode,
};
use walkdiff_core::embedding::{
    b_eval, b_x_eval, compensate_boundary, coupled_sup_distance, sample_embedded_step, simulate_embedded_paths,
    simulate_embedded_walk, BridgeFunction, StepSampler, TimeGrid,
};
use walkdiff_core::scale::{a_bar, classify_case, g_eval, Case, Status};
use walkdiff_core::walk::{interpolate, simulate_path_with_increments, step, MemoScale, ScaleProvider, WalkPath};
use walkdiff_core::{
    classify_boundary, DensityFamily, DiffusionSpec, IncrementMeasure, Interval, QFunction, QMethod, RngStream,
    ScaleSolver, Side, Uniforms,
};

fn model(name: &str, params: &[(&str, f64)], m: f64) -> QFunction {
    let params: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    QFunction::new(DiffusionSpec::from_catalog(name, &params, None, m).unwrap())
}

fn rad() -> IncrementMeasure {
    IncrementMeasure::rademacher()
}

/// Standard normal CDF from statrs, which is accurate to about 1e-10.
fn phi_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

#[test]
fn diffusion_coefficients() {
    let tm = model("two_media", &[("A", 2.0)], 0.0);
    assert_eq!(tm.spec().eta_unchecked(-1.0), 2.0);
    assert_eq!(tm.spec().eta_unchecked(3.0), 1.0);
    let gbm = model("gbm", &[], 1.0);
    assert_eq!(gbm.spec().eta_unchecked(-0.5), 0.0);
    assert_eq!(model("bm", &[], 0.0).spec().eta_unchecked(3.7), 1.0);
}

#[test]
fn q_examples() {
    let bm = model("bm", &[], 0.0);
    assert_relative_eq!(bm.q_eval(0.0, 2.0).unwrap(), 4.0, max_relative = 1e-12);
    let e = std::f64::consts::E;
    for method in [QMethod::Auto, QMethod::Quadrature] {
        let gbm = model("gbm", &[], 1.0).with_method(method);
        assert_relative_eq!(gbm.q_eval(1.0, e).unwrap(), 2.0 * e - 4.0, max_relative = 1e-9);
        assert_eq!(gbm.q_eval(1.7, 1.7).unwrap(), 0.0);
    }
    // Brute-force nested quadrature of 2/z^2: q(1, e) = ∫_1^e ∫_1^u 2/z^2 dz du.
    let n = 20_000;
    let h = (e - 1.0) / n as f64;
    let inner = |u: f64| 2.0 * (1.0 - 1.0 / u);
    let mut brute = 0.0;
    for i in 0..n {
        let u0 = 1.0 + i as f64 * h;
        brute += h / 6.0 * (inner(u0) + 4.0 * inner(u0 + 0.5 * h) + inner(u0 + h));
    }
    assert_relative_eq!(brute, 2.0 * e - 4.0, max_relative = 1e-10);
}

#[test]
fn q_x_examples() {
    let bm = model("bm", &[], 0.0);
    assert_relative_eq!(bm.q_x_eval(0.0, 2.0).unwrap(), 4.0, max_relative = 1e-12);
    assert_eq!(bm.q_x_eval(0.3, 0.3).unwrap(), 0.0);
    for method in [QMethod::Auto, QMethod::Quadrature] {
        let tm = model("two_media", &[("A", 2.0)], 0.0).with_method(method);
        assert_relative_eq!(tm.q_x_eval(0.0, -1.0).unwrap(), -0.5, max_relative = 1e-9);
        // Finite differences of q.
        let h = 1e-5;
        let fd = (tm.q_eval(0.0, -1.0 + h).unwrap() - tm.q_eval(0.0, -1.0 - h).unwrap()) / (2.0 * h);
        assert!((fd + 0.5).abs() < 1e-7, "{fd}");
    }
}

#[test]
fn boundary_accessibility() {
    assert!(!classify_boundary(&model("cev", &[("alpha", 2.0)], 1.0), Side::Left).unwrap().accessible);
    assert!(classify_boundary(&model("cev", &[("alpha", 0.5)], 1.0), Side::Left).unwrap().accessible);
    assert!(!classify_boundary(&model("bm", &[], 0.0), Side::Left).unwrap().accessible);
    assert!(classify_boundary(&model("absorbed_bm", &[], 0.5), Side::Left).unwrap().accessible);
}

#[test]
fn measure_validation_and_quantiles() {
    assert!(rad().validate().passed());
    let skew = IncrementMeasure::from_atoms(&[(-1.0, 0.5), (2.0, 0.5)]).unwrap();
    assert!(skew.validate().failures().any(|c| c.name == "centered"));
    let dirac = IncrementMeasure::from_atoms(&[(0.0, 1.0)]).unwrap();
    assert!(!dirac.validate().passed());

    assert_eq!(rad().quantile(0.25).unwrap(), -1.0);
    assert_eq!(rad().quantile(0.5).unwrap(), 1.0);
    let uni = IncrementMeasure::from_density(DensityFamily::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    assert_relative_eq!(uni.quantile(0.75).unwrap(), 0.5, max_relative = 1e-9);
}

#[test]
fn increment_sampling_statistics() {
    let mut rng = RngStream::new(11, 0);
    let n = 1_000_000;
    let mean: f64 = (0..n).map(|_| rad().sample_increment(&mut rng)).sum::<f64>() / n as f64;
    assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "{mean}");

    let pair = IncrementMeasure::from_atoms(&[(-2.0, 1.0 / 3.0), (1.0, 2.0 / 3.0)]).unwrap();
    let hits = (0..n).filter(|_| pair.sample_increment(&mut rng) == -2.0).count();
    let f = hits as f64 / n as f64;
    assert!((f - 1.0 / 3.0).abs() <= 3.0 * (2.0 / 9.0 / n as f64).sqrt(), "{f}");
}

#[test]
fn g_examples() {
    let abm = model("absorbed_bm", &[], 1.0);
    assert_relative_eq!(g_eval(&abm, &rad(), 1.0, 0.7).unwrap(), 0.49, max_relative = 1e-10);
    assert_eq!(g_eval(&abm, &rad(), 0.5, 0.7).unwrap(), f64::INFINITY);
    for qf in [abm, model("gbm", &[], 1.0), model("cev", &[("alpha", 0.5)], 1.0)] {
        assert_eq!(g_eval(&qf, &rad(), 0.8, 0.0).unwrap(), 0.0);
    }
}

#[test]
fn a_bar_examples() {
    let below = IncrementMeasure::from_atoms(&[(-1.0, 2.0 / 3.0), (2.0, 1.0 / 3.0)]).unwrap();
    assert_relative_eq!(a_bar(&below, &Interval::new(0.0, f64::INFINITY).unwrap(), 0.3).unwrap(), 0.3);
    let uni = IncrementMeasure::from_density(DensityFamily::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    assert_relative_eq!(a_bar(&uni, &Interval::new(0.0, 1.0).unwrap(), 0.25).unwrap(), 0.25);
    assert_eq!(a_bar(&rad(), &Interval::real_line(), 0.0).unwrap(), f64::INFINITY);
}

#[test]
fn scale_factor_examples() {
    let bm = ScaleSolver::new(model("bm", &[], 0.0), rad()).unwrap();
    for y in [-3.0, 0.0, 11.0] {
        assert_relative_eq!(bm.solve(y, 100).unwrap().a, 0.1, max_relative = 1e-10);
    }
    let abm = ScaleSolver::new(model("absorbed_bm", &[], 0.5), rad()).unwrap();
    assert_relative_eq!(abm.solve(0.05, 100).unwrap().a, 0.05, max_relative = 1e-10);

    // Oracle: fine scan of G_y(a) = -log(1 - a^2) on y = 1.
    let gbm = ScaleSolver::new(model("gbm", &[], 1.0), rad()).unwrap();
    let a = gbm.solve(1.0, 100).unwrap().a;
    let scan = (0..1_000_000)
        .map(|i| i as f64 * 1e-7)
        .take_while(|a| -(1.0 - a * a).ln() <= 0.01)
        .last()
        .unwrap();
    assert!((a - scan).abs() < 2e-7, "{a} vs {scan}");
    assert_relative_eq!(a, 0.099750, max_relative = 1e-5);
}

#[test]
fn case_classification() {
    let r = classify_case(&model("bm", &[], 0.0), &rad());
    assert_eq!((r.case_id, r.status("A1")), (1, Some(Status::Holds)));
    let r = classify_case(&model("gbm", &[], 1.0), &rad());
    assert_eq!(r.case_id, 2);
    assert_eq!(r.status("A2"), Some(Status::Holds));
    assert_eq!(r.status("cond_8"), Some(Status::Holds));
    assert_eq!(Case::of(&Interval::real_line()).id(), 1);
}

#[test]
fn table_examples() {
    let bm = ScaleSolver::new(model("bm", &[], 0.0), rad()).unwrap();
    let t = bm.build_table(4, &[-1.0, 0.0, 1.0]).unwrap();
    for a in &t.values {
        assert_relative_eq!(*a, 0.5, max_relative = 1e-10);
    }
    let abm = ScaleSolver::new(model("absorbed_bm", &[], 0.5), rad()).unwrap();
    let t = abm.build_table(100, &[0.01, 0.05, 0.2]).unwrap();
    for (a, want) in t.values.iter().zip([0.01, 0.05, 0.1]) {
        assert_relative_eq!(*a, want, max_relative = 1e-10);
    }
    assert!(bm.build_table(4, &[]).unwrap().values.is_empty());
}

#[test]
fn walk_steps_and_paths() {
    let bm = MemoScale::new(ScaleSolver::new(model("bm", &[], 0.0), rad()).unwrap(), 100).unwrap();
    assert_relative_eq!(step(&bm, 0.0, 1.0).unwrap(), 0.1, max_relative = 1e-10);
    assert_eq!(step(&bm, 0.4, 0.0).unwrap(), 0.4);

    let abm = MemoScale::new(ScaleSolver::new(model("absorbed_bm", &[], 0.05), rad()).unwrap(), 100).unwrap();
    assert_eq!(step(&abm, 0.0, 1.0).unwrap(), 0.0);
    let p = simulate_path_with_increments(&abm, 0.05, &[-1.0, 1.0, 1.0]).unwrap();
    assert_eq!(p.states, vec![0.05, 0.0, 0.0, 0.0]);
    assert_eq!(p.absorbed_at, Some(1));

    let p = simulate_path_with_increments(&bm, 0.2, &[1.0, -1.0]).unwrap();
    assert_relative_eq!(p.states[1], 0.3, max_relative = 1e-10);
    assert_relative_eq!(p.states[2], 0.2, max_relative = 1e-10);

    // Sample variance of the increments over one long path.
    let mut rng = RngStream::new(3, 0);
    let path = walkdiff_core::walk::simulate_path(&bm, &rad(), 0.0, 10_000, &mut rng).unwrap();
    let inc: Vec<f64> = path.states.windows(2).map(|w| w[1] - w[0]).collect();
    let var = inc.iter().map(|d| d * d).sum::<f64>() / inc.len() as f64;
    // Increments are ±a exactly, so every squared increment equals a^2.
    assert!((var - 0.01).abs() <= 4.0 * 1e-6, "{var}");
}

#[test]
fn path_interpolation() {
    let path = |states: Vec<f64>| WalkPath {
        n: 1,
        start: states[0],
        states,
        absorbed_at: None,
    };
    assert_relative_eq!(interpolate(&path(vec![0.0, 0.1]), 0.5).unwrap(), 0.05);
    assert_eq!(interpolate(&path(vec![0.0, 0.1, 0.0]), 1.0).unwrap(), 0.1);
    assert_relative_eq!(interpolate(&path(vec![0.0, 0.1, 0.0]), 1.25).unwrap(), 0.075);
}

#[test]
fn bridge_function_examples() {
    let bf = BridgeFunction::new(rad());
    assert_eq!(b_eval(&bf, 0.0, 0.0).unwrap(), 0.0);
    assert_relative_eq!(b_eval(&bf, 0.75, 0.5).unwrap(), 2.0 * phi_cdf(1.0) - 1.0, max_relative = 1e-9);
    assert_relative_eq!(b_eval(&bf, 1.0 - 1e-12, 0.2).unwrap(), 1.0, max_relative = 1e-12);
    let two_phi0 = (2.0 / std::f64::consts::PI).sqrt();
    assert_relative_eq!(b_x_eval(&bf, 0.0, 0.0).unwrap(), two_phi0, max_relative = 1e-12);
    assert_relative_eq!(b_x_eval(&bf, 0.96, 0.0).unwrap(), two_phi0 / 0.2, max_relative = 1e-12);
    let h = 1e-6;
    let fd = (b_eval(&bf, 0.3, 0.4 + h).unwrap() - b_eval(&bf, 0.3, 0.4 - h).unwrap()) / (2.0 * h);
    assert_relative_eq!(b_x_eval(&bf, 0.3, 0.4).unwrap(), fd, max_relative = 1e-7);
    assert!(b_x_eval(&bf, 0.5, 40.0).unwrap() < 1e-100);
    assert!(b_x_eval(&bf, 0.5, -40.0).unwrap() < 1e-100);
}

/// Monte Carlo oracle for `b(t, x) = E[sign(W_1) | W_t = x]`.
#[test]
fn bridge_function_matches_conditional_expectation() {
    let bf = BridgeFunction::new(rad());
    let (t, x) = (0.75f64, 0.5f64);
    let mut rng = RngStream::new(21, 0);
    let n = 400_000;
    let sd = (1.0 - t).sqrt();
    let mean = (0..n).map(|_| (x + sd * rng.normal()).signum()).sum::<f64>() / n as f64;
    let b = b_eval(&bf, t, x).unwrap();
    assert!((mean - b).abs() < 4.0 * (1.0 / n as f64).sqrt(), "{mean} vs {b}");
}

#[test]
fn embedded_step_examples() {
    let bm = model("bm", &[], 0.0);
    let bf = BridgeFunction::new(rad());
    let grid = TimeGrid::default();
    let mut rng = RngStream::new(31, 0);
    for _ in 0..200 {
        let s = sample_embedded_step(&bm, &bf, 0.0, 0.1, &mut rng, &grid).unwrap();
        assert!(s.endpoint == 0.1 || s.endpoint == -0.1);
    }
    let s = sample_embedded_step(&bm, &bf, 0.7, 0.0, &mut rng, &grid).unwrap();
    assert_eq!((s.endpoint, s.duration_xi), (0.7, 0.0));

    let sampler = StepSampler::new(&bm, &bf, &grid).unwrap();
    let n = 20_000;
    let xs: Vec<f64> = (0..n)
        .map(|i| sampler.sample_step(0.0, 0.1, &mut RngStream::new(32, i)).unwrap().duration_xi)
        .collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let target = g_eval(&bm, &rad(), 0.0, 0.1).unwrap();
    assert!((m - target).abs() <= 4.0 * sd / (n as f64).sqrt(), "{m} vs {target}");
}

#[test]
fn compensation_examples() {
    assert_relative_eq!(compensate_boundary(0.5, true, 0.0025, 100, true).unwrap(), 0.015, max_relative = 1e-12);
    assert_eq!(compensate_boundary(0.5, true, 0.0025, 100, false).unwrap(), 0.0);
    assert_eq!(compensate_boundary(0.5, true, 0.01, 100, true).unwrap(), 0.0);
    // Oracle: E[xi + wait] = Q + w * wait = 1/N.
    let (w, q) = (0.5, 0.0025);
    let wait = compensate_boundary(w, true, q, 100, true).unwrap();
    assert_relative_eq!(q + w * wait, 0.01, max_relative = 1e-12);
}

#[test]
fn embedded_walk_examples() {
    let qf = model("bm", &[], 0.0);
    let solver = ScaleSolver::new(qf.clone(), rad()).unwrap();
    let provider = MemoScale::new(solver, 100).unwrap();
    let bf = BridgeFunction::new(rad());
    let grid = TimeGrid::coarse(128);
    let mut rng = RngStream::new(41, 0);
    let empty = simulate_embedded_walk(&qf, &bf, &provider, 0.3, 0, &mut rng, &grid).unwrap();
    assert_eq!((empty.taus.clone(), empty.states.clone()), (vec![0.0], vec![0.3]));

    let paths = simulate_embedded_paths(&qf, &bf, &provider, 0.0, 100, 10_000, 42, &grid).unwrap();
    let finals: Vec<f64> = paths.iter().map(|p| *p.taus.last().unwrap()).collect();
    let n = finals.len() as f64;
    let m = finals.iter().sum::<f64>() / n;
    let sd = (finals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((m - 1.0).abs() <= 4.0 * sd / n.sqrt(), "{m}");
    let a = provider.scale_at(0.0).unwrap().a;
    assert_relative_eq!(a, 0.1, max_relative = 1e-10);
    assert!(paths.iter().all(|p| p.states[1] == a || p.states[1] == -a));
    let ups = paths.iter().filter(|p| p.states[1] > 0.0).count() as f64 / n;
    assert!((ups - 0.5).abs() <= 4.0 * (0.25 / n).sqrt(), "{ups}");
}

#[test]
fn lln_examples() {
    let r = lln_experiment(&ArraySpec::Constant { value: 1.0 }, &[10, 1000], 0.1, 50, 1).unwrap();
    assert!(r.values.iter().all(|v| *v == 0.0));
    let r = lln_experiment(&ArraySpec::Exponential { mean: 1.0 }, &[10_000], 0.1, 1000, 2).unwrap();
    assert!(r.values[0] <= 0.01, "{:?}", r.values);
}

#[test]
fn drift_examples() {
    let qf = model("bm", &[], 0.0);
    let provider = MemoScale::new(ScaleSolver::new(qf.clone(), rad()).unwrap(), 100).unwrap();
    let bf = BridgeFunction::new(rad());
    let grid = TimeGrid::coarse(64);
    let group = simulate_embedded_paths(&qf, &bf, &provider, 0.0, 10, 20, 5, &grid).unwrap();
    let r = stopping_time_drift(&[group], 0.0, 0.05).unwrap();
    assert_eq!(r.values, vec![0.0]);
    assert!(r.monotone_trend);
}

#[test]
fn ks_examples() {
    let cdf = |x: f64| phi_cdf(x);
    assert_relative_eq!(ks_statistic(&[0.0], cdf).unwrap(), 0.5, max_relative = 1e-12);
    let n = 100;
    // Exact quantiles of the uniform law.
    let s: Vec<f64> = (1..=n).map(|i| (i as f64 - 0.5) / n as f64).collect();
    let d = ks_statistic(&s, |x: f64| x.clamp(0.0, 1.0)).unwrap();
    assert_relative_eq!(d, 0.5 / n as f64, max_relative = 1e-9);
    let mut rng = RngStream::new(7, 0);
    let mut s: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
    s.sort_by(f64::total_cmp);
    assert!(ks_statistic(&s, cdf).unwrap() < 1.63 / 100.0);
}

#[test]
fn reference_marginals() {
    let cfg = EulerConfig::default();
    let bm = model("bm", &[], 0.0);
    let r = reference_marginal(bm.spec(), 1.0, ReferenceMode::Exact, &cfg).unwrap();
    for x in [-1.5, 0.0, 0.7] {
        assert_relative_eq!(r.cdf(x), phi_cdf(x), max_relative = 1e-9);
    }
    let gbm = model("gbm", &[], 1.0);
    let r = reference_marginal(gbm.spec(), 1.0, ReferenceMode::Exact, &cfg).unwrap();
    for x in [0.3f64, 1.0, 2.5] {
        assert_relative_eq!(r.cdf(x), phi_cdf(x.ln() + 0.5), max_relative = 1e-9);
    }
    let tm = model("two_media", &[("A", 2.0)], 0.0);
    assert!(reference_marginal(tm.spec(), 1.0, ReferenceMode::Exact, &cfg).is_err());
    assert!(reference_marginal(tm.spec(), 1.0, ReferenceMode::Auto, &cfg).unwrap().samples().is_some());
}

#[test]
fn coupling_examples() {
    let path = walkdiff_core::EmbeddedPath {
        n: 10,
        taus: vec![0.0],
        states: vec![0.4],
        per_step: vec![],
    };
    assert_eq!(coupled_sup_distance(&path, &[0.0], &[0.4]).unwrap(), 0.0);
}
