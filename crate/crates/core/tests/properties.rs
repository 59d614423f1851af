//! Structural invariants under random inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use walkdiff_core::convergence::ks_statistic;
use walkdiff_core::embedding::{BridgeFunction, StepSampler, TimeGrid};
use walkdiff_core::scale::g_eval;
use walkdiff_core::walk::{simulate_path, MemoScale};
use walkdiff_core::{DiffusionSpec, IncrementMeasure, QFunction, QMethod, RngStream, ScaleSolver, Uniforms};

fn model(name: &str, params: &[(&str, f64)], m: f64) -> QFunction {
    let params: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    QFunction::new(DiffusionSpec::from_catalog(name, &params, None, m).unwrap())
}

/// Centered three-point law `{-u: p, 0: 1 - p - r, v: r}` with `p u = r v`.
fn three_point(u: f64, v: f64, p: f64) -> IncrementMeasure {
    let r = p * u / v;
    let mid = 1.0 - p - r;
    let mut atoms = vec![(-u, p), (v, r)];
    if mid > 1e-9 {
        atoms.push((0.0, mid));
    }
    IncrementMeasure::from_atoms(&atoms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn q_is_nonnegative_and_quadrature_agrees(y in 0.05f64..5.0, x in 0.01f64..8.0) {
        for (name, params) in [("gbm", vec![]), ("cev", vec![("alpha", 2.0)]), ("cev", vec![("alpha", 0.5)])] {
            let auto = model(name, &params, 1.0);
            let quad = auto.clone().with_method(QMethod::Quadrature);
            let (qa, qq) = (auto.q_eval(y, x).unwrap(), quad.q_eval(y, x).unwrap());
            prop_assert!(qa >= 0.0 && qq >= 0.0);
            prop_assert!((qa - qq).abs() <= 1e-8 * qa.max(1e-12), "{name}: {qa} vs {qq}");
        }
    }

    #[test]
    fn q_is_convex_in_x(y in -3.0f64..3.0, x1 in -4.0f64..4.0, dx in 1e-3f64..2.0) {
        let qf = model("two_media", &[("A", 2.0)], 0.0);
        let (d1, d2) = (qf.q_x_eval(y, x1).unwrap(), qf.q_x_eval(y, x1 + dx).unwrap());
        prop_assert!(d2 >= d1 - 1e-12);
        prop_assert_eq!(qf.q_eval(y, y).unwrap(), 0.0);
    }

    #[test]
    fn g_is_nondecreasing_in_a(y in 0.1f64..3.0, a1 in 0.0f64..0.5, da in 0.0f64..0.5) {
        let mu = IncrementMeasure::rademacher();
        for qf in [model("gbm", &[], 1.0), model("absorbed_bm", &[], 1.0)] {
            let g1 = g_eval(&qf, &mu, y, a1 * y).unwrap();
            let g2 = g_eval(&qf, &mu, y, (a1 + da) * y).unwrap();
            prop_assert!(g2 >= g1 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn bridge_is_monotone_and_inside_support(
        u in 0.2f64..3.0, v in 0.2f64..3.0, p in 0.05f64..0.45,
        t in 0.0f64..0.999, x in -6.0f64..6.0, dx in 1e-4f64..3.0,
    ) {
        let mu = three_point(u, v, p.min(0.9 * v / (u + v)));
        let bf = BridgeFunction::new(mu);
        let (b1, b2) = (bf.b(t, x).unwrap(), bf.b(t, x + dx).unwrap());
        prop_assert!(b2 >= b1);
        prop_assert!(b1 >= -u - 1e-12 && b1 <= v + 1e-12);
        prop_assert!(bf.b_x(t, x).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scale_factor_respects_its_constraints(y in 0.05f64..4.0, n in 2u64..5000) {
        let mu = IncrementMeasure::rademacher();
        for name in ["gbm", "absorbed_bm"] {
            let solver = ScaleSolver::new(model(name, &[], 1.0), mu.clone()).unwrap();
            let r = solver.solve(y, n).unwrap();
            prop_assert!(r.a >= 0.0 && r.a <= r.a_bar * (1.0 + 1e-12));
            prop_assert!(r.achieved_g <= (1.0 + 1e-6) / n as f64);
            let coarser = solver.solve(y, n / 2).unwrap();
            prop_assert!(coarser.a >= r.a);
        }
    }

    #[test]
    fn walks_stay_in_the_closed_interval(seed in any::<u64>(), m in 0.01f64..2.0) {
        let mu = IncrementMeasure::rademacher();
        for name in ["gbm", "absorbed_bm", "cev"] {
            let params: &[(&str, f64)] = if name == "cev" { &[("alpha", 0.5)] } else { &[] };
            let solver = ScaleSolver::new(model(name, params, m), mu.clone()).unwrap();
            let provider = MemoScale::new(solver, 50).unwrap();
            let mut rng = RngStream::new(seed, 0);
            let path = simulate_path(&provider, &mu, m, 200, &mut rng).unwrap();
            prop_assert!(path.states.iter().all(|y| *y >= 0.0 && y.is_finite()));
        }
    }

    #[test]
    fn embedded_endpoints_are_atoms(seed in any::<u64>(), y in -2.0f64..2.0, a in 0.0f64..0.5) {
        let mu = three_point(1.0, 2.0, 0.3);
        let qf = model("bm", &[], 0.0);
        let bf = BridgeFunction::new(mu.clone());
        let grid = TimeGrid::coarse(64);
        let sampler = StepSampler::new(&qf, &bf, &grid).unwrap();
        let s = sampler.sample_step(y, a, &mut RngStream::new(seed, 1)).unwrap();
        let atoms: Vec<f64> = mu.atoms().unwrap().iter().map(|at| y + a * at.x).collect();
        prop_assert!(atoms.contains(&s.endpoint), "{} not in {:?}", s.endpoint, atoms);
        prop_assert!(s.duration_xi >= 0.0);
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), id in any::<u64>()) {
        let (mut a, mut b) = (RngStream::new(seed, id), RngStream::new(seed, id));
        for _ in 0..16 {
            prop_assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn ks_lies_in_unit_interval(mut xs in prop::collection::vec(-5.0f64..5.0, 1..200)) {
        xs.sort_by(f64::total_cmp);
        let d = ks_statistic(&xs, |x| (0.5 + x / 10.0).clamp(0.0, 1.0)).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(d >= 0.5 / xs.len() as f64 - 1e-12);
    }
}
