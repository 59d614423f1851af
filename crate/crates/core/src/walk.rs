//! Scaled random walks `Y_{k+1} = Y_k + a_N(Y_k) X_{k+1}`.
//!
//! Scale factors are solved on demand and memoised by quantised state, so a
//! walk that wanders over a large range never needs a precomputed table. Each
//! memo cell is solved at a fixed representative state, which makes the
//! cached value a pure function of the cell and keeps paths bit-identical
//! however many threads share the memo.

use std::collections::HashMap;

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Interval, Side};
use crate::error::{Error, Result};
use crate::measure::IncrementMeasure;
use crate::rng::{RngStream, Uniforms};
use crate::scale::{ScaleFactorTable, ScaleSolver};

/// Scale factor in effect at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScale {
    pub a: f64,
    /// `G_y(a)`.
    pub g: f64,
    /// Probability that a step of size `a` ends on a finite boundary.
    pub landing_mass: f64,
    pub lands_left: bool,
    pub lands_right: bool,
}

impl StepScale {
    pub const ZERO: StepScale = StepScale {
        a: 0.0,
        g: 0.0,
        landing_mass: 0.0,
        lands_left: false,
        lands_right: false,
    };
}

/// Anything that can hand out `a_N(y)`.
pub trait ScaleProvider: Sync {
    fn n(&self) -> u64;
    fn interval(&self) -> Interval;
    /// Scale at `y ∈ [l, r]`; zero at a finite boundary.
    fn scale_at(&self, y: f64) -> Result<StepScale>;
    /// Distance within which a computed state is treated as lying on a
    /// boundary.
    fn snap_tolerance(&self) -> f64;
}

/// Cap on memo entries; the memo is cleared when it grows beyond this.
const MEMO_CAPACITY: usize = 1 << 20;

/// On-demand scale factors with a memo keyed by quantised state.
#[derive(Debug)]
pub struct MemoScale {
    solver: ScaleSolver,
    n: u64,
    quantum: f64,
    anchor: f64,
    memo: RwLock<HashMap<i64, StepScale>>,
}

impl MemoScale {
    /// Quantum `1e-12 (r - l)` on a bounded interval, `1e-12` otherwise.
    pub fn new(solver: ScaleSolver, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("N must be positive".into()));
        }
        let iv = solver.interval();
        let quantum = if iv.l.is_finite() && iv.r.is_finite() { 1e-12 * iv.width() } else { 1e-12 };
        let anchor = if iv.l.is_finite() {
            iv.l
        } else if iv.r.is_finite() {
            iv.r
        } else {
            0.0
        };
        Ok(Self {
            solver,
            n,
            quantum,
            anchor,
            memo: RwLock::new(HashMap::new()),
        })
    }

    pub fn solver(&self) -> &ScaleSolver {
        &self.solver
    }

    pub fn quantum(&self) -> f64 {
        self.quantum
    }

    /// Memo cell of `y` and the state at which that cell is solved.
    fn cell(&self, y: f64) -> (i64, f64) {
        let iv = self.solver.interval();
        let k = ((y - self.anchor) / self.quantum).floor();
        let mut rep = self.anchor + (k + 0.5) * self.quantum;
        // Keep representatives strictly inside the interval.
        let half = 0.5 * self.quantum;
        if rep >= iv.r {
            rep = iv.r - half;
        }
        if rep <= iv.l {
            rep = iv.l + half;
        }
        (k as i64, rep)
    }

    fn compute(&self, y: f64) -> Result<StepScale> {
        let res = self.solver.solve(y, self.n)?;
        let mu = self.solver.mu();
        let lands_left = res.landing_sides.contains(&Side::Left);
        let lands_right = res.landing_sides.contains(&Side::Right);
        let mut landing_mass = 0.0;
        if lands_left {
            landing_mass += mu.atom_mass(Side::Left);
        }
        if lands_right {
            landing_mass += mu.atom_mass(Side::Right);
        }
        Ok(StepScale {
            a: res.a,
            g: res.achieved_g,
            landing_mass,
            lands_left,
            lands_right,
        })
    }
}

impl ScaleProvider for MemoScale {
    fn n(&self) -> u64 {
        self.n
    }

    fn interval(&self) -> Interval {
        self.solver.interval()
    }

    fn scale_at(&self, y: f64) -> Result<StepScale> {
        let iv = self.solver.interval();
        if y.is_nan() {
            return Err(Error::NonFiniteInput("state is NaN".into()));
        }
        if !iv.contains_closed(y) {
            return Err(Error::Domain(format!("state {y} outside [{}, {}]", iv.l, iv.r)));
        }
        if y == iv.l || y == iv.r {
            return Ok(StepScale::ZERO);
        }
        let (key, rep) = self.cell(y);
        if let Some(s) = self.memo.read().get(&key) {
            return Ok(*s);
        }
        let s = self.compute(rep)?;
        let mut memo = self.memo.write();
        if memo.len() >= MEMO_CAPACITY {
            memo.clear();
        }
        memo.insert(key, s);
        Ok(s)
    }

    fn snap_tolerance(&self) -> f64 {
        2.0 * self.quantum
    }
}

/// Scale factors read from a precomputed table (no extrapolation).
#[derive(Debug, Clone)]
pub struct TableScale {
    table: ScaleFactorTable,
    interval: Interval,
}

impl TableScale {
    pub fn new(table: ScaleFactorTable, interval: Interval) -> Self {
        Self { table, interval }
    }
}

impl ScaleProvider for TableScale {
    fn n(&self) -> u64 {
        self.table.n
    }

    fn interval(&self) -> Interval {
        self.interval
    }

    fn scale_at(&self, y: f64) -> Result<StepScale> {
        if y == self.interval.l || y == self.interval.r {
            return Ok(StepScale::ZERO);
        }
        let a = self
            .table
            .interpolate(y)
            .ok_or_else(|| Error::Domain(format!("state {y} outside the table's grid; regenerate the table")))?;
        Ok(StepScale {
            a,
            g: f64::NAN,
            landing_mass: 0.0,
            lands_left: false,
            lands_right: false,
        })
    }

    fn snap_tolerance(&self) -> f64 {
        1e-12 * self.interval.width().min(1.0)
    }
}

/// Puts a state computed as `y + a x` on the boundary when it is within
/// `tol` of it; errors when it lies further outside.
pub(crate) fn snap_to_interval(iv: &Interval, p: f64, tol: f64) -> Result<f64> {
    if iv.l.is_finite() && (p - iv.l).abs() <= tol.max(4.0 * f64::EPSILON * iv.l.abs()) {
        return Ok(iv.l);
    }
    if iv.r.is_finite() && (p - iv.r).abs() <= tol.max(4.0 * f64::EPSILON * iv.r.abs()) {
        return Ok(iv.r);
    }
    if !iv.contains_closed(p) {
        return Err(Error::Domain(format!(
            "step to {p} leaves [{}, {}]; the scale factor is inconsistent with the interval",
            iv.l, iv.r
        )));
    }
    Ok(p)
}

/// One walk step `y + a_N(y) x`.
pub fn step<P: ScaleProvider + ?Sized>(provider: &P, y: f64, x: f64) -> Result<f64> {
    let iv = provider.interval();
    if y.is_nan() || x.is_nan() {
        return Err(Error::NonFiniteInput("walk step with NaN".into()));
    }
    if !iv.contains_closed(y) {
        return Err(Error::Domain(format!("state {y} outside [{}, {}]", iv.l, iv.r)));
    }
    if y == iv.l || y == iv.r || x == 0.0 {
        return Ok(y);
    }
    let s = provider.scale_at(y)?;
    snap_to_interval(&iv, y + s.a * x, provider.snap_tolerance())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub n: u64,
    pub start: f64,
    pub states: Vec<f64>,
    /// First index at which the path sits on a finite boundary.
    pub absorbed_at: Option<usize>,
}

impl WalkPath {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> f64 {
        *self.states.last().expect("paths hold at least the start")
    }
}

/// Walk driven by the given increments.
pub fn simulate_path_with_increments<P: ScaleProvider + ?Sized>(
    provider: &P,
    start: f64,
    increments: &[f64],
) -> Result<WalkPath> {
    let iv = provider.interval();
    let mut states = Vec::with_capacity(increments.len() + 1);
    states.push(start);
    let mut absorbed_at = (start == iv.l || start == iv.r).then_some(0);
    let mut y = start;
    for (k, &x) in increments.iter().enumerate() {
        y = step(provider, y, x)?;
        if absorbed_at.is_none() && (y == iv.l || y == iv.r) {
            absorbed_at = Some(k + 1);
        }
        states.push(y);
    }
    Ok(WalkPath {
        n: provider.n(),
        start,
        states,
        absorbed_at,
    })
}

/// `steps`-step walk with increments drawn from `mu`. Draws stop once the
/// path is absorbed.
pub fn simulate_path<P: ScaleProvider + ?Sized, R: Uniforms>(
    provider: &P,
    mu: &IncrementMeasure,
    start: f64,
    steps: usize,
    rng: &mut R,
) -> Result<WalkPath> {
    let iv = provider.interval();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(start);
    let mut absorbed_at = (start == iv.l || start == iv.r).then_some(0);
    let mut y = start;
    for k in 0..steps {
        if absorbed_at.is_none() {
            let x = mu.sample_increment(rng);
            y = step(provider, y, x)?;
            if y == iv.l || y == iv.r {
                absorbed_at = Some(k + 1);
            }
        }
        states.push(y);
    }
    Ok(WalkPath {
        n: provider.n(),
        start,
        states,
        absorbed_at,
    })
}

/// Final state of a `steps`-step walk without storing the path.
pub fn simulate_endpoint<P: ScaleProvider + ?Sized, R: Uniforms>(
    provider: &P,
    mu: &IncrementMeasure,
    start: f64,
    steps: usize,
    rng: &mut R,
) -> Result<f64> {
    let iv = provider.interval();
    let mut y = start;
    for _ in 0..steps {
        if y == iv.l || y == iv.r {
            break;
        }
        y = step(provider, y, mu.sample_increment(rng))?;
    }
    Ok(y)
}

/// `paths` independent walks; path `i` uses stream `(seed, i)`.
pub fn simulate_paths<P: ScaleProvider + ?Sized>(
    provider: &P,
    mu: &IncrementMeasure,
    start: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<WalkPath>> {
    (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64);
            simulate_path(provider, mu, start, steps, &mut rng)
        })
        .collect()
}

/// Linear interpolation `Y_t = Y_⌊t⌋ + (t - ⌊t⌋)(Y_⌊t⌋+1 - Y_⌊t⌋)`.
pub fn interpolate(path: &WalkPath, t: f64) -> Result<f64> {
    interpolate_states(&path.states, t)
}

pub(crate) fn interpolate_states(states: &[f64], t: f64) -> Result<f64> {
    let k = states.len() - 1;
    if t.is_nan() || t < 0.0 || t > k as f64 {
        return Err(Error::Domain(format!("time {t} outside [0, {k}]")));
    }
    let i = t.floor() as usize;
    if i >= k {
        return Ok(states[k]);
    }
    let frac = t - i as f64;
    if frac == 0.0 {
        return Ok(states[i]);
    }
    Ok(states[i] + frac * (states[i + 1] - states[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DiffusionSpec, QFunction};
    use std::collections::BTreeMap;

    fn memo(name: &str, m: f64, n: u64) -> MemoScale {
        let spec = DiffusionSpec::from_catalog(name, &BTreeMap::new(), None, m).unwrap();
        let solver = ScaleSolver::new(QFunction::new(spec), IncrementMeasure::rademacher()).unwrap();
        MemoScale::new(solver, n).unwrap()
    }

    #[test]
    fn step_examples() {
        let bm = memo("bm", 0.0, 100);
        assert!((step(&bm, 0.0, 1.0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(step(&bm, 0.3, 0.0).unwrap(), 0.3);
        let abs_bm = memo("absorbed_bm", 0.05, 100);
        assert_eq!(step(&abs_bm, 0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(step(&abs_bm, -0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn forced_paths() {
        let bm = memo("bm", 0.0, 100);
        let p = simulate_path_with_increments(&bm, 0.0, &[1.0, -1.0]).unwrap();
        assert!((p.states[1] - 0.1).abs() < 1e-12);
        assert!(p.states[2].abs() < 1e-12);
        let abs_bm = memo("absorbed_bm", 0.05, 100);
        let p = simulate_path_with_increments(&abs_bm, 0.05, &[-1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.states, vec![0.05, 0.0, 0.0, 0.0]);
        assert_eq!(p.absorbed_at, Some(1));
    }

    #[test]
    fn increment_variance() {
        let bm = memo("bm", 0.0, 100);
        let mut rng = RngStream::new(3, 0);
        let p = simulate_path(&bm, &IncrementMeasure::rademacher(), 0.0, 10_000, &mut rng).unwrap();
        let inc: Vec<f64> = p.states.windows(2).map(|w| w[1] - w[0]).collect();
        let n = inc.len() as f64;
        let mean = inc.iter().sum::<f64>() / n;
        let var = inc.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        // Rademacher steps of size 0.1: the variance estimate is nearly exact.
        assert!((var - 0.01).abs() < 4.0 * 0.01 * (2.0 / n).sqrt());
    }

    #[test]
    fn unit_n_matches_simple_random_walk() {
        let bm = memo("bm", 0.0, 1);
        let mu = IncrementMeasure::rademacher();
        let mut a = RngStream::new(8, 1);
        let mut b = RngStream::new(8, 1);
        let p = simulate_path(&bm, &mu, 0.0, 200, &mut a).unwrap();
        let mut s = 0.0;
        for k in 0..200 {
            s += mu.sample_increment(&mut b);
            assert!((p.states[k + 1] - s).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolation() {
        let path = WalkPath {
            n: 1,
            start: 0.0,
            states: vec![0.0, 0.1, 0.0],
            absorbed_at: None,
        };
        assert!((interpolate(&path, 0.5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(interpolate(&path, 1.0).unwrap(), 0.1);
        assert!((interpolate(&path, 1.25).unwrap() - 0.075).abs() < 1e-15);
        assert!(interpolate(&path, 2.5).is_err());
    }

    #[test]
    fn parallel_paths_are_deterministic() {
        let gbm = memo("gbm", 1.0, 50);
        let mu = IncrementMeasure::rademacher();
        let a = simulate_paths(&gbm, &mu, 1.0, 100, 8, 42).unwrap();
        let fresh = memo("gbm", 1.0, 50);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_paths(&fresh, &mu, 1.0, 100, 8, 42).unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.states.iter().all(|&y| y > 0.0)));
    }
}
