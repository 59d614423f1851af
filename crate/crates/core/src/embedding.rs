//! Explicit embedding of walk steps into the diffusion.
//!
//! One step from `y` with scale `a` runs the process
//! `L_s = y + a b(s, W_s)`, `s ∈ [0, 1]`, where `W` is a standard Brownian
//! motion and `b(t, x) = E[F^{-1}(Phi(W_1)) | W_t = x]`. `L_1` has law
//! `mu((· - y) / a)`, and the time the diffusion needs to trace `L` is
//!
//! ```text
//! xi = ∫_0^1 a² b_x(s, W_s)² / eta(L_s)² ds,
//! ```
//!
//! so sampling `W` yields a joint draw of the step duration and the new
//! state. The integral is taken in `v = -ln(1 - s)` on a uniform grid, which
//! tames the `1/sqrt(1 - s)` blow-up of `b_x` for atomic laws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Interval, QFunction};
use crate::error::{Error, Result};
use crate::measure::{DensityFamily, IncrementMeasure};
use crate::normal;
use crate::quadrature::gauss_hermite;
use crate::rng::{RngStream, Uniforms};
use crate::scale::a_bar;
use crate::walk::{interpolate_states, snap_to_interval, ScaleProvider};

/// Default number of Gauss–Hermite nodes for absolutely continuous laws.
pub const DEFAULT_HERMITE_NODES: usize = 64;

#[derive(Debug, Clone)]
enum Repr {
    Atomic {
        xs: Vec<f64>,
        thresholds: Vec<f64>,
        gaps: Vec<f64>,
    },
    Linear {
        sigma: f64,
    },
    Density {
        /// Standard-normal nodes `sqrt(2) x_i`.
        nodes: Vec<f64>,
        /// Weights `w_i / sqrt(pi)`, summing to one.
        weights: Vec<f64>,
    },
}

/// `b(t, x) = E[F^{-1}(Phi(W_1)) | W_t = x]` and its space derivative.
///
/// For atomic laws `b` is a finite sum of Gaussian tail probabilities; for
/// densities the conditional expectation over `W_1 ~ N(x, 1 - t)` is taken
/// with a Gauss–Hermite rule.
#[derive(Debug, Clone)]
pub struct BridgeFunction {
    mu: IncrementMeasure,
    repr: Repr,
}

/// `b` together with the offsets from the support ends, which keep
/// positions near a boundary free of cancellation.
#[derive(Debug, Clone, Copy)]
struct BridgeValue {
    b: f64,
    bx: f64,
    /// `b - inf supp mu` (atomic laws only).
    off_lo: f64,
    /// `sup supp mu - b` (atomic laws only).
    off_hi: f64,
}

impl BridgeFunction {
    pub fn new(mu: IncrementMeasure) -> Self {
        Self::with_nodes(mu, DEFAULT_HERMITE_NODES)
    }

    pub fn with_nodes(mu: IncrementMeasure, hermite_nodes: usize) -> Self {
        let repr = if let Some(atoms) = mu.atoms() {
            let xs: Vec<f64> = atoms.iter().map(|a| a.x).collect();
            let gaps = xs.windows(2).map(|w| w[1] - w[0]).collect();
            Repr::Atomic {
                xs,
                thresholds: mu.thresholds().to_vec(),
                gaps,
            }
        } else if let Some(DensityFamily::Normal { sigma }) = mu.density().map(|d| d.family()) {
            Repr::Linear { sigma: *sigma }
        } else {
            let (x, w) = gauss_hermite(hermite_nodes.max(2));
            let pi_sqrt = std::f64::consts::PI.sqrt();
            Repr::Density {
                nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
                weights: w.iter().map(|v| v / pi_sqrt).collect(),
            }
        };
        Self { mu, repr }
    }

    pub fn mu(&self) -> &IncrementMeasure {
        &self.mu
    }

    /// Standard-normal cut points of an atomic law; empty otherwise.
    pub fn thresholds(&self) -> &[f64] {
        match &self.repr {
            Repr::Atomic { thresholds, .. } => thresholds,
            _ => &[],
        }
    }

    /// `b(t, x)` for `t ∈ [0, 1]`; at `t = 1` this is `F^{-1}(Phi(x))`.
    pub fn b(&self, t: f64, x: f64) -> Result<f64> {
        check_args(t, x)?;
        if t > 1.0 {
            return Err(Error::Domain(format!("b needs t <= 1, got {t}")));
        }
        if t == 1.0 {
            return Ok(self.mu.quantile_of_normal(x));
        }
        Ok(self.eval_sd((1.0 - t).sqrt(), x).b)
    }

    /// `b_x(t, x)` for `t ∈ [0, 1)`.
    pub fn b_x(&self, t: f64, x: f64) -> Result<f64> {
        check_args(t, x)?;
        if t >= 1.0 {
            return Err(Error::Domain(format!("b_x needs t < 1, got {t}")));
        }
        Ok(self.bx_sd((1.0 - t).sqrt(), x))
    }

    /// `b_x` given `sd = sqrt(1 - t) > 0`.
    #[inline]
    fn bx_sd(&self, sd: f64, x: f64) -> f64 {
        match &self.repr {
            Repr::Atomic { thresholds, gaps, .. } => {
                let mut acc = 0.0;
                for (c, g) in thresholds.iter().zip(gaps) {
                    acc += g * normal::pdf((c - x) / sd);
                }
                acc / sd
            }
            Repr::Linear { sigma } => *sigma,
            Repr::Density { nodes, weights } => nodes
                .iter()
                .zip(weights)
                .map(|(z, w)| w * self.quantile_slope(x + sd * z))
                .sum(),
        }
    }

    fn eval_sd(&self, sd: f64, x: f64) -> BridgeValue {
        match &self.repr {
            Repr::Atomic { xs, thresholds, gaps } => {
                let mut off_lo = 0.0;
                let mut off_hi = 0.0;
                let mut bx = 0.0;
                for (c, g) in thresholds.iter().zip(gaps) {
                    let u = (c - x) / sd;
                    off_lo += g * normal::sf(u);
                    off_hi += g * normal::cdf(u);
                    bx += g * normal::pdf(u);
                }
                let b = if off_lo <= off_hi {
                    xs[0] + off_lo
                } else {
                    xs[xs.len() - 1] - off_hi
                };
                BridgeValue {
                    b,
                    bx: bx / sd,
                    off_lo,
                    off_hi,
                }
            }
            Repr::Linear { sigma } => BridgeValue {
                b: sigma * x,
                bx: *sigma,
                off_lo: f64::INFINITY,
                off_hi: f64::INFINITY,
            },
            Repr::Density { nodes, weights } => {
                let mut b = 0.0;
                let mut bx = 0.0;
                for (z, w) in nodes.iter().zip(weights) {
                    let u = x + sd * z;
                    b += w * self.mu.quantile_of_normal(u);
                    bx += w * self.quantile_slope(u);
                }
                BridgeValue {
                    b,
                    bx,
                    off_lo: b - self.mu.inf_supp(),
                    off_hi: self.mu.sup_supp() - b,
                }
            }
        }
    }

    /// Derivative of `u -> F^{-1}(Phi(u))`, i.e. `phi(u) / f(F^{-1}(Phi(u)))`.
    fn quantile_slope(&self, u: f64) -> f64 {
        let phi = normal::pdf(u);
        if phi == 0.0 {
            return 0.0;
        }
        let d = self.mu.density().expect("density representation");
        let f = d.pdf(self.mu.quantile_of_normal(u));
        if f > 0.0 {
            phi / f
        } else {
            0.0
        }
    }
}

fn check_args(t: f64, x: f64) -> Result<()> {
    if t.is_nan() || x.is_nan() {
        return Err(Error::NonFiniteInput("bridge function at NaN".into()));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("bridge function needs t >= 0, got {t}")));
    }
    Ok(())
}

pub fn b_eval(bf: &BridgeFunction, t: f64, x: f64) -> Result<f64> {
    bf.b(t, x)
}

pub fn b_x_eval(bf: &BridgeFunction, t: f64, x: f64) -> Result<f64> {
    bf.b_x(t, x)
}

/// Grid for the duration integral in `v = -ln(1 - s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Initial number of intervals on `[0, v_max]`; rounded up to even.
    pub nodes: usize,
    /// Upper end of the `v` range; `s` stops at `1 - exp(-v_max)`.
    pub v_max: f64,
    /// Accept when the full and half-resolution sums differ by less than
    /// this fraction. The integrand follows a Brownian path, so the pathwise
    /// error only decays like the grid spacing; the mean of the estimate is
    /// unbiased at any resolution, and this check guards against grids far
    /// too coarse for the path rather than chasing pathwise precision.
    pub refine_tol: f64,
    /// Largest interval count reached by doubling before giving up.
    pub max_nodes: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            nodes: 2048,
            v_max: 24.0,
            refine_tol: 0.1,
            max_nodes: 1 << 16,
        }
    }
}

impl TimeGrid {
    /// Coarse grid for experiments that need many steps and only the law of
    /// sums of durations; refinement is effectively disabled.
    pub fn coarse(nodes: usize) -> Self {
        Self {
            nodes,
            v_max: 24.0,
            refine_tol: f64::INFINITY,
            max_nodes: nodes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nodes < 2 || !(self.v_max > 0.0 && self.v_max.is_finite()) || self.refine_tol.is_nan() {
            return Err(Error::Domain(format!("invalid time grid {self:?}")));
        }
        Ok(())
    }
}

/// One embedded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedStep {
    pub start_y: f64,
    pub scale_a: f64,
    pub endpoint: f64,
    pub duration_xi: f64,
    /// Extra time charged when the step is absorbed at a boundary.
    pub compensation_wait: f64,
}

impl EmbeddedStep {
    /// Step from a state that has already been absorbed: the diffusion is
    /// stopped and the clock advances by `1/N`.
    fn absorbed(y: f64, n: u64) -> Self {
        Self {
            start_y: y,
            scale_a: 0.0,
            endpoint: y,
            duration_xi: 0.0,
            compensation_wait: 1.0 / n as f64,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration_xi + self.compensation_wait
    }
}

/// Embedded walk: stopping times `tau(k)` and the diffusion at those times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPath {
    pub n: u64,
    pub taus: Vec<f64>,
    pub states: Vec<f64>,
    pub per_step: Vec<EmbeddedStep>,
}

impl EmbeddedPath {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Diffusion values at `(time offset, position)` nodes inside one step.
#[derive(Debug, Default)]
struct StepTrace {
    delta: Vec<f64>,
    pos: Vec<f64>,
}

/// Reusable sampler of embedded steps; caches the grid so repeated draws
/// skip the setup done by [`sample_embedded_step`].
pub struct StepSampler<'a> {
    qf: &'a QFunction,
    bf: &'a BridgeFunction,
    grid: &'a TimeGrid,
    interval: Interval,
    constant_eta: Option<f64>,
    snap_tol: f64,
    /// `sqrt(1 - s)` at the base grid nodes.
    root: Vec<f64>,
    /// Standard deviations of the Brownian increments between base nodes.
    inc_sd: Vec<f64>,
}

impl<'a> StepSampler<'a> {
    pub fn new(qf: &'a QFunction, bf: &'a BridgeFunction, grid: &'a TimeGrid) -> Result<Self> {
        Self::with_snap_tol(qf, bf, grid, 0.0)
    }

    /// Sampler that treats endpoints within `snap_tol` of a finite boundary as
    /// lying on it. Zero means a few ulps of the step.
    pub fn with_snap_tol(qf: &'a QFunction, bf: &'a BridgeFunction, grid: &'a TimeGrid, snap_tol: f64) -> Result<Self> {
        grid.validate()?;
        let spec = qf.spec();
        let constant_eta = spec.coefficient().constant_value().map(f64::abs);
        let m0 = grid.nodes + grid.nodes % 2;
        let h = grid.v_max / m0 as f64;
        let root: Vec<f64> = (0..=m0).map(|k| (-0.5 * k as f64 * h).exp()).collect();
        let var_factor = -(-h).exp_m1();
        let inc_sd = root[..m0].iter().map(|r| r * var_factor.sqrt()).collect();
        Ok(Self {
            qf,
            bf,
            grid,
            interval: qf.interval(),
            constant_eta,
            snap_tol,
            root,
            inc_sd,
        })
    }

    pub fn sample_step<R: Uniforms + ?Sized>(&self, y: f64, a: f64, rng: &mut R) -> Result<EmbeddedStep> {
        self.sample(y, a, rng, None)
    }

    fn sample<R: Uniforms + ?Sized>(
        &self,
        y: f64,
        a: f64,
        rng: &mut R,
        mut trace: Option<&mut StepTrace>,
    ) -> Result<EmbeddedStep> {
        if y.is_nan() || a.is_nan() {
            return Err(Error::NonFiniteInput("embedded step at NaN".into()));
        }
        if !self.interval.contains_open(y) {
            return Err(Error::Domain(format!(
                "embedded step needs y inside ({}, {}), got {y}",
                self.interval.l, self.interval.r
            )));
        }
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Domain(format!("scale must be finite and nonnegative, got {a}")));
        }
        if a == 0.0 {
            if let Some(tr) = trace {
                tr.delta.push(0.0);
                tr.pos.push(y);
            }
            return Ok(EmbeddedStep {
                start_y: y,
                scale_a: 0.0,
                endpoint: y,
                duration_xi: 0.0,
                compensation_wait: 0.0,
            });
        }
        let mu = self.bf.mu();
        if !mu.is_atomic() {
            let abar = a_bar(mu, &self.interval, y)?;
            if a > abar * (1.0 + 1e-9) {
                return Err(Error::Domain(format!("scale {a} exceeds a_bar({y}) = {abar}")));
            }
        }
        let tol = self.snap_tol.max(default_snap_tol(y, a, mu));
        let anchors = match self.bf.repr {
            Repr::Atomic { ref xs, .. } => (
                snap_to_interval(&self.interval, y + a * xs[0], tol)?,
                snap_to_interval(&self.interval, y + a * xs[xs.len() - 1], tol)?,
            ),
            _ => (y + a * mu.inf_supp(), y + a * mu.sup_supp()),
        };

        let grid = self.grid;
        let m0 = grid.nodes + grid.nodes % 2;
        let mut h = grid.v_max / m0 as f64;
        let mut v: Vec<f64> = (0..=m0).map(|k| k as f64 * h).collect();
        let mut w = Vec::with_capacity(m0 + 1);
        w.push(0.0);
        for k in 0..m0 {
            w.push(w[k] + self.inc_sd[k] * rng.normal());
        }
        let w1 = w[m0] + (-grid.v_max).exp().sqrt() * rng.normal();
        let want_pos = trace.is_some();
        let mut pos = Vec::new();
        let mut f: Vec<f64> = Vec::with_capacity(m0 + 1);
        for k in 0..=m0 {
            let (fk, pk) = self.integrand(y, a, anchors, self.root[k], w[k], want_pos);
            f.push(fk);
            if want_pos {
                pos.push(pk);
            }
        }

        let mut xi = trapezoid(&f, h, 1);
        loop {
            let coarse = trapezoid(&f, h, 2);
            if !xi.is_finite() || (xi - coarse).abs() <= grid.refine_tol * xi.abs() || xi == 0.0 {
                break;
            }
            let m = v.len() - 1;
            if 2 * m > grid.max_nodes {
                return Err(Error::GridUnderflow { nodes: m + 1 });
            }
            // Brownian-bridge midpoints in s-time.
            let half = 0.5 * h;
            let c_half = -(-half).exp_m1();
            let lean = 1.0 / (1.0 + (-half).exp());
            let mut v2 = Vec::with_capacity(2 * m + 1);
            let mut w2 = Vec::with_capacity(2 * m + 1);
            let mut f2 = Vec::with_capacity(2 * m + 1);
            let mut p2 = Vec::with_capacity(if want_pos { 2 * m + 1 } else { 0 });
            for k in 0..m {
                v2.push(v[k]);
                w2.push(w[k]);
                f2.push(f[k]);
                if want_pos {
                    p2.push(pos[k]);
                }
                let d1 = (-v[k]).exp() * c_half;
                let d2 = (-(v[k] + half)).exp() * c_half;
                let mean = w[k] + lean * (w[k + 1] - w[k]);
                let wm = mean + (d1 * d2 / (d1 + d2)).sqrt() * rng.normal();
                let vm = v[k] + half;
                let (fm, pm) = self.integrand(y, a, anchors, (-0.5 * vm).exp(), wm, want_pos);
                v2.push(vm);
                w2.push(wm);
                f2.push(fm);
                if want_pos {
                    p2.push(pm);
                }
            }
            v2.push(v[m]);
            w2.push(w[m]);
            f2.push(f[m]);
            if want_pos {
                p2.push(pos[m]);
            }
            v = v2;
            w = w2;
            f = f2;
            pos = p2;
            h = half;
            xi = trapezoid(&f, h, 1);
        }
        if !xi.is_finite() {
            return Err(Error::Domain(format!("step duration is not finite at y = {y}, a = {a}")));
        }

        let endpoint = match self.bf.repr {
            Repr::Atomic { ref xs, .. } => {
                let i = mu.atom_index_for_normal(w1);
                if i == 0 {
                    anchors.0
                } else if i == xs.len() - 1 {
                    anchors.1
                } else {
                    snap_to_interval(&self.interval, y + a * xs[i], tol)?
                }
            }
            _ => snap_to_interval(&self.interval, y + a * mu.quantile_of_normal(w1), tol)?,
        };

        if let Some(tr) = trace.as_deref_mut() {
            let mut acc = 0.0;
            tr.delta.push(0.0);
            tr.pos.push(pos[0]);
            for k in 1..f.len() {
                acc += 0.5 * h * (f[k - 1] + f[k]);
                tr.delta.push(acc);
                tr.pos.push(pos[k]);
            }
            tr.delta.push(acc);
            tr.pos.push(endpoint);
        }
        Ok(EmbeddedStep {
            start_y: y,
            scale_a: a,
            endpoint,
            duration_xi: xi,
            compensation_wait: 0.0,
        })
    }

    /// Integrand of the duration in `v`, and the position `L_s` when asked.
    /// `sd = sqrt(1 - s)`; the factor `1 - s` is the Jacobian of `s -> v`.
    #[inline]
    fn integrand(&self, y: f64, a: f64, anchors: (f64, f64), sd: f64, w: f64, want_pos: bool) -> (f64, f64) {
        let one_minus_s = sd * sd;
        if let (Some(sigma), false) = (self.constant_eta, want_pos) {
            let bx = self.bf.bx_sd(sd, w);
            let r = a * bx / sigma;
            return (r * r * one_minus_s, f64::NAN);
        }
        let bv = self.bf.eval_sd(sd, w);
        let mut pos = if !matches!(self.bf.repr, Repr::Atomic { .. }) {
            y + a * bv.b
        } else if bv.off_lo <= bv.off_hi {
            anchors.0 + a * bv.off_lo
        } else {
            anchors.1 - a * bv.off_hi
        };
        if bv.bx == 0.0 {
            return (0.0, pos);
        }
        let iv = &self.interval;
        if pos <= iv.l {
            pos = next_up(iv.l);
        } else if pos >= iv.r {
            pos = next_down(iv.r);
        }
        let eta = match self.constant_eta {
            Some(sigma) => sigma,
            None => self.qf.spec().eta_unchecked(pos).abs(),
        };
        let r = a * bv.bx / eta;
        (r * r * one_minus_s, pos)
    }
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Trapezoid sum over every `stride`-th node with base spacing `h`.
fn trapezoid(f: &[f64], h: f64, stride: usize) -> f64 {
    let m = f.len() - 1;
    let mut acc = 0.5 * (f[0] + f[m]);
    let mut k = stride;
    while k < m {
        acc += f[k];
        k += stride;
    }
    acc * h * stride as f64
}

/// Snap tolerance for a step built outside a walk: a few ulps of the
/// quantities involved.
fn default_snap_tol(y: f64, a: f64, mu: &IncrementMeasure) -> f64 {
    let reach = mu.inf_supp().abs().max(mu.sup_supp().abs());
    let scale = if reach.is_finite() { y.abs().max(a * reach) } else { y.abs() };
    16.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE)
}

/// Jointly samples the duration and endpoint of one step of scale `a` from
/// `y`.
pub fn sample_embedded_step<R: Uniforms + ?Sized>(
    qf: &QFunction,
    bf: &BridgeFunction,
    y: f64,
    a: f64,
    rng: &mut R,
    grid: &TimeGrid,
) -> Result<EmbeddedStep> {
    StepSampler::new(qf, bf, grid)?.sample_step(y, a, rng)
}

/// Extra wait `(1/w)(1/N - Q_y)` for a step absorbed at an accessible
/// boundary, where `w` is the probability of landing there. Zero when the
/// step ends inside.
pub fn compensate_boundary(
    w: f64,
    q_at_boundary_finite: bool,
    q_y: f64,
    n: u64,
    endpoint_at_boundary: bool,
) -> Result<f64> {
    if !endpoint_at_boundary {
        return Ok(0.0);
    }
    if n == 0 {
        return Err(Error::Domain("N must be positive".into()));
    }
    if !q_at_boundary_finite {
        return Err(Error::InvalidCase("compensation requested at an inaccessible boundary".into()));
    }
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::InvalidCase(format!(
            "compensation needs a positive landing probability, got {w}"
        )));
    }
    if q_y.is_nan() {
        return Err(Error::NonFiniteInput("Q_y is NaN".into()));
    }
    Ok(((1.0 / n as f64 - q_y) / w).max(0.0))
}

/// Chains embedded steps with scale factors from `provider`, charging the
/// compensation wait whenever a step is absorbed at a boundary.
pub fn simulate_embedded_walk<P: ScaleProvider + ?Sized, R: Uniforms + ?Sized>(
    qf: &QFunction,
    bf: &BridgeFunction,
    provider: &P,
    start: f64,
    steps: usize,
    rng: &mut R,
    grid: &TimeGrid,
) -> Result<EmbeddedPath> {
    let mut walker = Walker::new(qf, bf, provider, start, grid)?;
    for _ in 0..steps {
        walker.advance(rng, None)?;
    }
    Ok(walker.finish())
}

/// `paths` embedded walks; path `i` uses stream `(seed, i)`.
pub fn simulate_embedded_paths<P: ScaleProvider + ?Sized>(
    qf: &QFunction,
    bf: &BridgeFunction,
    provider: &P,
    start: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    grid: &TimeGrid,
) -> Result<Vec<EmbeddedPath>> {
    (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64);
            simulate_embedded_walk(qf, bf, provider, start, steps, &mut rng, grid)
        })
        .collect()
}

struct Walker<'a, P: ScaleProvider + ?Sized> {
    ctx: StepSampler<'a>,
    provider: &'a P,
    n: u64,
    y: f64,
    tau: f64,
    path: EmbeddedPath,
}

impl<'a, P: ScaleProvider + ?Sized> Walker<'a, P> {
    fn new(qf: &'a QFunction, bf: &'a BridgeFunction, provider: &'a P, start: f64, grid: &'a TimeGrid) -> Result<Self> {
        let iv = qf.interval();
        if provider.interval() != iv {
            return Err(Error::Domain("scale provider and diffusion disagree on the interval".into()));
        }
        if start.is_nan() || !iv.contains_closed(start) {
            return Err(Error::Domain(format!("start {start} outside [{}, {}]", iv.l, iv.r)));
        }
        let n = provider.n();
        Ok(Self {
            ctx: StepSampler::with_snap_tol(qf, bf, grid, provider.snap_tolerance())?,
            provider,
            n,
            y: start,
            tau: 0.0,
            path: EmbeddedPath {
                n,
                taus: vec![0.0],
                states: vec![start],
                per_step: Vec::new(),
            },
        })
    }

    fn advance<R: Uniforms + ?Sized>(&mut self, rng: &mut R, trace: Option<&mut StepTrace>) -> Result<EmbeddedStep> {
        let iv = self.ctx.interval;
        let y = self.y;
        let step = if y == iv.l || y == iv.r {
            if let Some(tr) = trace {
                tr.delta.push(0.0);
                tr.pos.push(y);
            }
            EmbeddedStep::absorbed(y, self.n)
        } else {
            let s = self.provider.scale_at(y)?;
            let mut st = self.ctx.sample(y, s.a, rng, trace)?;
            let at_boundary = (s.lands_left && st.endpoint == iv.l) || (s.lands_right && st.endpoint == iv.r);
            st.compensation_wait =
                compensate_boundary(s.landing_mass, s.landing_mass > 0.0, s.g, self.n, at_boundary)?;
            st
        };
        self.tau += step.duration();
        self.y = step.endpoint;
        self.path.taus.push(self.tau);
        self.path.states.push(self.y);
        self.path.per_step.push(step);
        Ok(step)
    }

    fn finish(self) -> EmbeddedPath {
        self.path
    }
}

/// Embedded walk together with the diffusion it was embedded into, sampled
/// at fixed times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPath {
    pub path: EmbeddedPath,
    pub times: Vec<f64>,
    pub diffusion: Vec<f64>,
}

/// Runs the embedded walk for a constant-coefficient diffusion while
/// reconstructing the diffusion itself at `times` (nondecreasing, within
/// `[0, t_max]`). Inside a step the diffusion is `y + a b(s, W_s)` at time
/// `tau + delta(s)`, linearly interpolated between grid nodes; during a
/// compensation wait it sits on the boundary.
pub fn simulate_coupled_walk<P: ScaleProvider + ?Sized, R: Uniforms + ?Sized>(
    qf: &QFunction,
    bf: &BridgeFunction,
    provider: &P,
    start: f64,
    times: &[f64],
    rng: &mut R,
    grid: &TimeGrid,
) -> Result<CoupledPath> {
    if qf.spec().coefficient().constant_value().is_none() {
        return Err(Error::UnsupportedModel(format!(
            "coupled paths need a constant coefficient, got {}",
            qf.spec().name()
        )));
    }
    if let Some(i) = times.windows(2).position(|p| !(p[0] <= p[1])) {
        return Err(Error::UnsortedInput(i + 1));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Domain("coupling times must be finite and nonnegative".into()));
    }
    let t_max = times.last().copied().unwrap_or(0.0);
    let mut walker = Walker::new(qf, bf, provider, start, grid)?;
    let n = walker.n;
    let min_steps = (n as f64 * t_max).ceil() as usize;
    let mut diffusion = Vec::with_capacity(times.len());
    let mut next = 0;
    while next < times.len() && times[next] == 0.0 {
        diffusion.push(start);
        next += 1;
    }
    let mut trace = StepTrace::default();
    while walker.path.steps() < min_steps || next < times.len() {
        let tau0 = walker.tau;
        trace.delta.clear();
        trace.pos.clear();
        let step = walker.advance(rng, Some(&mut trace))?;
        let tau1 = walker.tau;
        while next < times.len() && times[next] <= tau1 {
            let d = times[next] - tau0;
            let m = if d >= step.duration_xi {
                step.endpoint
            } else {
                let j = trace.delta.partition_point(|&x| x <= d).clamp(1, trace.delta.len() - 1);
                let (d0, d1) = (trace.delta[j - 1], trace.delta[j]);
                let (p0, p1) = (trace.pos[j - 1], trace.pos[j]);
                if d1 > d0 {
                    p0 + (d - d0) / (d1 - d0) * (p1 - p0)
                } else {
                    p1
                }
            };
            diffusion.push(m);
            next += 1;
        }
    }
    Ok(CoupledPath {
        path: walker.finish(),
        times: times.to_vec(),
        diffusion,
    })
}

/// `max_j |Y_{N t_j} - M_{t_j}|` with `Y` the linearly interpolated walk.
pub fn coupled_sup_distance(path: &EmbeddedPath, times: &[f64], diffusion: &[f64]) -> Result<f64> {
    if times.len() != diffusion.len() {
        return Err(Error::Domain("times and diffusion values differ in length".into()));
    }
    let n = path.n as f64;
    let mut sup: f64 = 0.0;
    for (t, m) in times.iter().zip(diffusion) {
        let y = interpolate_states(&path.states, n * t)?;
        sup = sup.max((y - m).abs());
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionSpec;
    use crate::scale::{g_eval, ScaleSolver};
    use crate::walk::MemoScale;
    use std::collections::BTreeMap;

    fn qf(name: &str, m: f64) -> QFunction {
        QFunction::new(DiffusionSpec::from_catalog(name, &BTreeMap::new(), None, m).unwrap())
    }

    fn rad() -> BridgeFunction {
        BridgeFunction::new(IncrementMeasure::rademacher())
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn rademacher_bridge_examples() {
        let bf = rad();
        assert_eq!(bf.b(0.0, 0.0).unwrap(), 0.0);
        let want = 2.0 * normal::cdf(1.0) - 1.0;
        assert!((bf.b(0.75, 0.5).unwrap() - want).abs() < 1e-14);
        assert!((want - 0.682_690).abs() < 1e-6);
        assert_eq!(bf.b(1.0, 0.2).unwrap(), 1.0);
        assert!((bf.b(1.0 - 1e-12, 0.2).unwrap() - 1.0).abs() < 1e-12);
        assert!((bf.b_x(0.0, 0.0).unwrap() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        assert!((bf.b_x(0.96, 0.0).unwrap() - 3.989_423).abs() < 1e-6);
        assert_eq!(bf.b_x(0.5, 60.0).unwrap(), 0.0);
        assert!(matches!(bf.b(1.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bf.b_x(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let uniform = IncrementMeasure::from_density(DensityFamily::Uniform {
            lo: -3f64.sqrt(),
            hi: 3f64.sqrt(),
        })
        .unwrap();
        let skew = IncrementMeasure::from_atoms(&[(-2.0, 1.0 / 3.0), (1.0, 2.0 / 3.0)]).unwrap();
        for bf in [rad(), BridgeFunction::new(uniform), BridgeFunction::new(skew)] {
            for &(t, x) in &[(0.0, 0.0), (0.3, -0.7), (0.9, 0.4), (0.5, 2.5)] {
                let h = 1e-5;
                let fd = (bf.b(t, x + h).unwrap() - bf.b(t, x - h).unwrap()) / (2.0 * h);
                let bx = bf.b_x(t, x).unwrap();
                assert!((fd - bx).abs() < 1e-6 * bx.max(1.0), "t={t} x={x}: {fd} vs {bx}");
            }
        }
    }

    #[test]
    fn density_bridge_is_the_heat_semigroup() {
        // For the uniform law, b(0, 0) = 0 and b(t, x) -> F^{-1}(Phi(x)) as t -> 1.
        let mu = IncrementMeasure::from_density(DensityFamily::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let bf = BridgeFunction::new(mu.clone());
        assert!(bf.b(0.0, 0.0).unwrap().abs() < 1e-14);
        let x = 0.3;
        assert!((bf.b(0.999_999, x).unwrap() - mu.quantile_of_normal(x)).abs() < 1e-5);
        // Range stays inside the support.
        for &x in &[-8.0, -1.0, 0.0, 2.0, 8.0] {
            let b = bf.b(0.2, x).unwrap();
            assert!(b > -1.0 && b < 1.0);
        }
    }

    #[test]
    fn endpoints_are_exact_atoms_and_mean_cost_matches() {
        let q = qf("bm", 0.0);
        let bf = rad();
        let grid = TimeGrid::default();
        let mut rng = RngStream::new(11, 0);
        let mut xs = Vec::new();
        let mut ups = 0;
        for _ in 0..4000 {
            let st = sample_embedded_step(&q, &bf, 0.0, 0.1, &mut rng, &grid).unwrap();
            assert!(st.endpoint == 0.1 || st.endpoint == -0.1);
            ups += (st.endpoint > 0.0) as usize;
            xs.push(st.duration_xi);
        }
        let (m, se) = mean_se(&xs);
        assert!((m - 0.01).abs() < 4.0 * se, "mean {m} se {se}");
        assert!((ups as f64 - 2000.0).abs() < 4.0 * 1000f64.sqrt());
    }

    #[test]
    fn gbm_mean_cost_matches_g() {
        let q = qf("gbm", 1.0);
        let mu = IncrementMeasure::rademacher();
        let g = g_eval(&q, &mu, 1.0, 0.2).unwrap();
        let bf = BridgeFunction::new(mu);
        let grid = TimeGrid::default();
        let mut rng = RngStream::new(5, 1);
        let xs: Vec<f64> = (0..3000)
            .map(|_| sample_embedded_step(&q, &bf, 1.0, 0.2, &mut rng, &grid).unwrap().duration_xi)
            .collect();
        let (m, se) = mean_se(&xs);
        assert!((m - g).abs() < 4.0 * se, "mean {m} se {se} g {g}");
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let q = qf("bm", 0.0);
        let mut rng = RngStream::new(1, 0);
        let st = sample_embedded_step(&q, &rad(), 0.3, 0.0, &mut rng, &TimeGrid::default()).unwrap();
        assert_eq!((st.endpoint, st.duration_xi), (0.3, 0.0));
    }

    #[test]
    fn scale_beyond_the_boundary_is_rejected() {
        let q = qf("absorbed_bm", 0.05);
        let mut rng = RngStream::new(1, 0);
        let err = sample_embedded_step(&q, &rad(), 0.05, 0.2, &mut rng, &TimeGrid::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn compensation_examples() {
        assert!((compensate_boundary(0.5, true, 0.0025, 100, true).unwrap() - 0.015).abs() < 1e-15);
        assert_eq!(compensate_boundary(0.5, true, 0.0025, 100, false).unwrap(), 0.0);
        assert_eq!(compensate_boundary(0.5, true, 0.01, 100, true).unwrap(), 0.0);
        assert!(matches!(compensate_boundary(0.0, true, 0.0025, 100, true), Err(Error::InvalidCase(_))));
        assert!(matches!(compensate_boundary(0.5, false, 0.0025, 100, true), Err(Error::InvalidCase(_))));
    }

    fn memo(q: &QFunction, n: u64) -> MemoScale {
        MemoScale::new(ScaleSolver::new(q.clone(), IncrementMeasure::rademacher()).unwrap(), n).unwrap()
    }

    #[test]
    fn empty_walk() {
        let q = qf("bm", 0.0);
        let p = memo(&q, 100);
        let mut rng = RngStream::new(1, 0);
        let path = simulate_embedded_walk(&q, &rad(), &p, 0.0, 0, &mut rng, &TimeGrid::default()).unwrap();
        assert_eq!(path.taus, vec![0.0]);
        assert_eq!(path.states, vec![0.0]);
    }

    #[test]
    fn absorbed_walk_keeps_unit_time_steps() {
        let q = qf("absorbed_bm", 0.05);
        let p = memo(&q, 100);
        let bf = rad();
        let grid = TimeGrid::coarse(256);
        let mut rng = RngStream::new(3, 0);
        let mut durations = Vec::new();
        for _ in 0..200 {
            let path = simulate_embedded_walk(&q, &bf, &p, 0.05, 20, &mut rng, &grid).unwrap();
            assert!(path.taus.windows(2).all(|w| w[0] <= w[1]));
            durations.extend(path.per_step.iter().map(|s| s.duration()));
        }
        let (m, se) = mean_se(&durations);
        assert!((m - 0.01).abs() < 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn coupled_walk_tracks_the_diffusion() {
        let q = qf("bm", 0.0);
        let p = memo(&q, 100);
        let bf = rad();
        let times: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let mut rng = RngStream::new(9, 0);
        let cp = simulate_coupled_walk(&q, &bf, &p, 0.0, &times, &mut rng, &TimeGrid::coarse(256)).unwrap();
        assert_eq!(cp.diffusion.len(), times.len());
        assert_eq!(cp.diffusion[0], 0.0);
        let d = coupled_sup_distance(&cp.path, &cp.times, &cp.diffusion).unwrap();
        assert!(d.is_finite() && d < 1.0);
        assert_eq!(coupled_sup_distance(&cp.path, &[0.0], &[0.0]).unwrap(), 0.0);
        let gbm = qf("gbm", 1.0);
        let pg = memo(&gbm, 100);
        assert!(matches!(
            simulate_coupled_walk(&gbm, &bf, &pg, 1.0, &times, &mut rng, &TimeGrid::coarse(256)),
            Err(Error::UnsupportedModel(_))
        ));
    }
}
