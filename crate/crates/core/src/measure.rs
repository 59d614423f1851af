//! Centered increment laws `mu` for the walk steps.
//!
//! A measure is either a finite list of atoms or one of a few density
//! families. Support bounds, the atom masses sitting on them and the second
//! moment are computed once at construction. Quantiles follow the
//! right-continuous convention `F^{-1}(r) = inf{x : F(x) > r}`, so at a jump
//! of `F` the upper atom is returned.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::Side;
use crate::error::{Error, Result};
use crate::normal;
use crate::quadrature::{integrate, integrate_upper_tail, QuadConfig};
use crate::rng::Uniforms;

/// Tolerance on the total mass of a measure.
pub const MASS_TOL: f64 = 1e-9;
/// Tolerance on the mean, relative to the largest support point (or 1).
pub const MEAN_TOL: f64 = 1e-12;
/// Number of probabilities in a tabulated quantile.
pub const QUANTILE_TABLE_SIZE: usize = 4097;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub w: f64,
}

/// Density families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityFamily {
    Uniform { lo: f64, hi: f64 },
    Normal { sigma: f64 },
    /// `c exp(-|x|) / (1 + x^2)`: finite variance, but exponential moments
    /// of every order above one diverge. Used to exercise divergence detection.
    ExpRational,
}

#[derive(Debug, Clone)]
pub enum MeasureKind {
    Atoms(Vec<Atom>),
    Density(Density),
}

#[derive(Debug, Clone)]
pub struct Density {
    family: DensityFamily,
    /// Normalising constant for families that need one.
    norm: f64,
    table: Option<Arc<TabulatedQuantile>>,
}

impl Density {
    pub fn family(&self) -> &DensityFamily {
        &self.family
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.family {
            DensityFamily::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            DensityFamily::Normal { sigma } => normal::pdf(x / sigma) / sigma,
            DensityFamily::ExpRational => self.norm * (-x.abs()).exp() / (1.0 + x * x),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.family {
            DensityFamily::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            DensityFamily::Normal { sigma } => normal::cdf(x / sigma),
            DensityFamily::ExpRational => {
                let tail = self.norm * exp_rational_tail(x.abs());
                if x <= 0.0 {
                    tail
                } else {
                    1.0 - tail
                }
            }
        }
    }

    /// Points where the density is not smooth.
    pub fn breaks(&self) -> Vec<f64> {
        match self.family {
            DensityFamily::ExpRational => vec![0.0],
            _ => Vec::new(),
        }
    }
}

/// `∫_u^∞ exp(-s) / (1 + s^2) ds` for `u ≥ 0`.
fn exp_rational_tail(u: f64) -> f64 {
    let cfg = QuadConfig {
        rel_tol: 1e-13,
        ..QuadConfig::default()
    };
    // Factor out exp(-u) so the integrand stays O(1) for large u.
    let v = integrate_upper_tail(|s| (-s).exp() / (1.0 + (u + s) * (u + s)), 0.0, &cfg)
        .expect("integrand is bounded and decays exponentially");
    (-u).exp() * v
}

/// Quantile function tabulated on Chebyshev-spaced probabilities and
/// interpolated with a monotone cubic (Fritsch–Carlson).
#[derive(Debug, Clone)]
pub struct TabulatedQuantile {
    p: Vec<f64>,
    x: Vec<f64>,
    slope: Vec<f64>,
}

impl TabulatedQuantile {
    /// Builds the table by marching outward from the median, integrating the
    /// density between consecutive nodes and solving for each node by Newton.
    pub fn build(pdf: impl Fn(f64) -> f64, cdf: impl Fn(f64) -> f64, lo: f64, hi: f64, size: usize) -> Self {
        let m = size - 1;
        let p: Vec<f64> = (0..=m)
            .map(|j| 0.5 * (1.0 - (std::f64::consts::PI * j as f64 / m as f64).cos()))
            .collect();
        let mut x = vec![0.0; size];
        x[0] = lo;
        x[m] = hi;
        let solve = |target: f64| bisect_cdf(&cdf, target, lo, hi);
        let mid = m / 2;
        x[mid] = solve(p[mid]);
        let cfg = QuadConfig {
            rel_tol: 1e-12,
            ..QuadConfig::default()
        };
        let step = |from: f64, f_from: f64, target: f64, guess: f64| -> f64 {
            let mut z = guess;
            for _ in 0..30 {
                let (a, b, sign) = if z >= from { (from, z, 1.0) } else { (z, from, -1.0) };
                let mass = sign * integrate(&pdf, a, b, &[], &cfg).unwrap_or(f64::NAN);
                let resid = f_from + mass - target;
                let d = pdf(z);
                if !resid.is_finite() || d <= 0.0 {
                    return solve(target);
                }
                let next = z - resid / d;
                if (next - z).abs() <= 1e-14 * (1.0 + z.abs()) {
                    return next;
                }
                z = next;
            }
            solve(target)
        };
        for j in (mid + 1)..m {
            let guess = x[j - 1] + (p[j] - p[j - 1]) / pdf(x[j - 1]).max(1e-300);
            let guess = if guess.is_finite() && guess < hi { guess } else { x[j - 1] };
            x[j] = step(x[j - 1], p[j - 1], p[j], guess);
        }
        for j in (1..mid).rev() {
            let guess = x[j + 1] - (p[j + 1] - p[j]) / pdf(x[j + 1]).max(1e-300);
            let guess = if guess.is_finite() && guess > lo { guess } else { x[j + 1] };
            x[j] = step(x[j + 1], p[j + 1], p[j], guess);
        }
        for j in 1..m {
            x[j] = x[j].max(x[j - 1]);
        }
        let slope = pchip_slopes(&p, &x);
        Self { p, x, slope }
    }

    /// Interpolated quantile; `None` in the outermost cells when the
    /// corresponding support bound is infinite.
    pub fn eval(&self, r: f64) -> Option<f64> {
        let m = self.p.len() - 1;
        let j = self.p.partition_point(|&p| p <= r).clamp(1, m) - 1;
        let (x0, x1) = (self.x[j], self.x[j + 1]);
        if !x0.is_finite() || !x1.is_finite() {
            return None;
        }
        let h = self.p[j + 1] - self.p[j];
        let t = (r - self.p[j]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * x0
            + (t3 - 2.0 * t2 + t) * h * self.slope[j]
            + (-2.0 * t3 + 3.0 * t2) * x1
            + (t3 - t2) * h * self.slope[j + 1];
        Some(v.clamp(x0, x1))
    }
}

fn pchip_slopes(p: &[f64], x: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut d = vec![0.0; n];
    let secant: Vec<f64> = (0..n - 1)
        .map(|j| {
            let s = (x[j + 1] - x[j]) / (p[j + 1] - p[j]);
            if s.is_finite() {
                s
            } else {
                0.0
            }
        })
        .collect();
    for j in 1..n - 1 {
        let (a, b) = (secant[j - 1], secant[j]);
        if a > 0.0 && b > 0.0 {
            let (h0, h1) = (p[j] - p[j - 1], p[j + 1] - p[j]);
            let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
            d[j] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = secant[0];
    d[n - 1] = secant[n - 2];
    d
}

/// Solves `cdf(x) = target` by bisection, expanding infinite brackets.
fn bisect_cdf(cdf: &impl Fn(f64) -> f64, target: f64, lo: f64, hi: f64) -> f64 {
    let mut a = if lo.is_finite() { lo } else { -1.0 };
    while !lo.is_finite() && cdf(a) > target {
        a *= 2.0;
    }
    let mut b = if hi.is_finite() { hi } else { 1.0 };
    while !hi.is_finite() && cdf(b) <= target {
        b *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if cdf(mid) > target {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}

/// Law of one walk increment.
#[derive(Debug, Clone)]
pub struct IncrementMeasure {
    kind: MeasureKind,
    inf_supp: f64,
    sup_supp: f64,
    second_moment: f64,
    mean: f64,
    total_mass: f64,
    mass_at_inf: f64,
    mass_at_sup: f64,
    /// Cumulative atom weights `C_1, ..., C_n`.
    cumulative: Vec<f64>,
    /// `Phi^{-1}(C_i)` for `i < n`: the standard-normal cut points that map a
    /// Gaussian variable onto the atoms.
    thresholds: Vec<f64>,
}

impl IncrementMeasure {
    /// Measure with the given atoms. Atoms are sorted and coincident points
    /// merged. Structural problems (non-finite values, weights outside
    /// `(0, 1]`, no atoms) are errors; centering and normalisation are checked
    /// by [`IncrementMeasure::validate`].
    pub fn from_atoms(atoms: &[(f64, f64)]) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms given".into()));
        }
        let mut list: Vec<Atom> = Vec::with_capacity(atoms.len());
        for &(x, w) in atoms {
            if !x.is_finite() || !w.is_finite() {
                return Err(Error::InvalidMeasure(format!("atom ({x}, {w}) is not finite")));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::InvalidMeasure(format!("atom weight {w} outside (0, 1]")));
            }
            list.push(Atom { x, w });
        }
        list.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mut merged: Vec<Atom> = Vec::with_capacity(list.len());
        for a in list {
            match merged.last_mut() {
                Some(last) if last.x == a.x => last.w += a.w,
                _ => merged.push(a),
            }
        }
        let total: f64 = merged.iter().map(|a| a.w).sum();
        let mean = merged.iter().map(|a| a.w * a.x).sum::<f64>() / total;
        let second = merged.iter().map(|a| a.w * a.x * a.x).sum::<f64>() / total;
        let mut acc = 0.0;
        let cumulative: Vec<f64> = merged
            .iter()
            .map(|a| {
                acc += a.w / total;
                acc
            })
            .collect();
        let thresholds = cumulative[..cumulative.len() - 1]
            .iter()
            .map(|&c| normal::quantile(c))
            .collect();
        Ok(Self {
            inf_supp: merged[0].x,
            sup_supp: merged[merged.len() - 1].x,
            mass_at_inf: merged[0].w / total,
            mass_at_sup: merged[merged.len() - 1].w / total,
            kind: MeasureKind::Atoms(merged),
            second_moment: second,
            mean,
            total_mass: total,
            cumulative,
            thresholds,
        })
    }

    /// `±1` with probability one half each.
    pub fn rademacher() -> Self {
        Self::from_atoms(&[(-1.0, 0.5), (1.0, 0.5)]).expect("valid atoms")
    }

    pub fn from_density(family: DensityFamily) -> Result<Self> {
        let (inf_supp, sup_supp, mean, second, norm) = match family {
            DensityFamily::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidMeasure(format!("uniform needs finite lo < hi, got [{lo}, {hi}]")));
                }
                (lo, hi, 0.5 * (lo + hi), (hi * hi + hi * lo + lo * lo) / 3.0, 1.0)
            }
            DensityFamily::Normal { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::InvalidMeasure(format!("normal needs sigma > 0, got {sigma}")));
                }
                (f64::NEG_INFINITY, f64::INFINITY, 0.0, sigma * sigma, 1.0)
            }
            DensityFamily::ExpRational => {
                // With I = ∫_0^∞ e^{-x}/(1+x^2) dx we have c = 1/(2I) and, since
                // x^2/(1+x^2) = 1 - 1/(1+x^2), a second moment of 2c - 1.
                let i = exp_rational_tail(0.0);
                let c = 0.5 / i;
                (f64::NEG_INFINITY, f64::INFINITY, 0.0, 2.0 * c - 1.0, c)
            }
        };
        let mut density = Density {
            family,
            norm,
            table: None,
        };
        if matches!(density.family, DensityFamily::ExpRational) {
            let d = density.clone();
            let table = TabulatedQuantile::build(
                |x| d.pdf(x),
                |x| d.cdf(x),
                inf_supp,
                sup_supp,
                QUANTILE_TABLE_SIZE,
            );
            density.table = Some(Arc::new(table));
        }
        Ok(Self {
            kind: MeasureKind::Density(density),
            inf_supp,
            sup_supp,
            second_moment: second,
            mean,
            total_mass: 1.0,
            mass_at_inf: 0.0,
            mass_at_sup: 0.0,
            cumulative: Vec::new(),
            thresholds: Vec::new(),
        })
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn atoms(&self) -> Option<&[Atom]> {
        match &self.kind {
            MeasureKind::Atoms(a) => Some(a),
            MeasureKind::Density(_) => None,
        }
    }

    pub fn density(&self) -> Option<&Density> {
        match &self.kind {
            MeasureKind::Density(d) => Some(d),
            MeasureKind::Atoms(_) => None,
        }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self.kind, MeasureKind::Atoms(_))
    }

    pub fn inf_supp(&self) -> f64 {
        self.inf_supp
    }

    pub fn sup_supp(&self) -> f64 {
        self.sup_supp
    }

    pub fn supp_bound(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.inf_supp,
            Side::Right => self.sup_supp,
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Atom mass at `inf supp` or `sup supp`.
    pub fn atom_mass(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.mass_at_inf,
            Side::Right => self.mass_at_sup,
        }
    }

    pub fn is_compact(&self) -> bool {
        self.inf_supp.is_finite() && self.sup_supp.is_finite()
    }

    /// Cumulative atom weights; empty for densities.
    pub fn cumulative_weights(&self) -> &[f64] {
        &self.cumulative
    }

    /// Standard-normal cut points `Phi^{-1}(C_i)`, `i = 1..n-1`; empty for
    /// densities.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Index of the atom selected by a standard-normal value `z`, i.e. the
    /// atom `F^{-1}(Phi(z))`.
    pub fn atom_index_for_normal(&self, z: f64) -> usize {
        self.thresholds.partition_point(|&c| c <= z)
    }

    /// Right-continuous generalised inverse `inf{x : F(x) > r}`.
    pub fn quantile(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Domain(format!("quantile level {r} outside (0, 1)")));
        }
        Ok(self.quantile_unchecked(r))
    }

    pub(crate) fn quantile_unchecked(&self, r: f64) -> f64 {
        match &self.kind {
            MeasureKind::Atoms(atoms) => {
                let i = self.cumulative.partition_point(|&c| c <= r).min(atoms.len() - 1);
                atoms[i].x
            }
            MeasureKind::Density(d) => match d.family {
                DensityFamily::Uniform { lo, hi } => lo + r * (hi - lo),
                DensityFamily::Normal { sigma } => sigma * normal::quantile(r),
                DensityFamily::ExpRational => d
                    .table
                    .as_ref()
                    .and_then(|t| t.eval(r))
                    .unwrap_or_else(|| bisect_cdf(&|x| d.cdf(x), r, self.inf_supp, self.sup_supp)),
            },
        }
    }

    /// `F^{-1}(Phi(z))`, the monotone map pushing a standard normal onto `mu`.
    pub fn quantile_of_normal(&self, z: f64) -> f64 {
        match &self.kind {
            MeasureKind::Atoms(atoms) => atoms[self.atom_index_for_normal(z)].x,
            MeasureKind::Density(d) => match d.family {
                DensityFamily::Normal { sigma } => sigma * z,
                DensityFamily::Uniform { lo, hi } => {
                    let p = if z < 0.0 { normal::cdf(z) } else { 1.0 - normal::sf(z) };
                    lo + p * (hi - lo)
                }
                DensityFamily::ExpRational => {
                    // Use the symmetric tail for precision on the right.
                    if z > 0.0 {
                        -self.quantile_unchecked(normal::sf(z).max(f64::MIN_POSITIVE))
                    } else {
                        self.quantile_unchecked(normal::cdf(z).max(f64::MIN_POSITIVE))
                    }
                }
            },
        }
    }

    /// One draw from `mu` by inversion of a uniform variate.
    pub fn sample_increment<R: Uniforms + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile_unchecked(rng.uniform())
    }

    /// Law of `-X`.
    pub fn reflect(&self) -> IncrementMeasure {
        match &self.kind {
            MeasureKind::Atoms(atoms) => {
                let flipped: Vec<(f64, f64)> = atoms.iter().map(|a| (-a.x, a.w)).collect();
                Self::from_atoms(&flipped).expect("reflection of valid atoms")
            }
            MeasureKind::Density(d) => {
                let family = match d.family {
                    DensityFamily::Uniform { lo, hi } => DensityFamily::Uniform { lo: -hi, hi: -lo },
                    ref other => other.clone(),
                };
                let mut m = self.clone();
                m.inf_supp = -self.sup_supp;
                m.sup_supp = -self.inf_supp;
                m.mass_at_inf = self.mass_at_sup;
                m.mass_at_sup = self.mass_at_inf;
                m.mean = -self.mean;
                m.kind = MeasureKind::Density(Density { family, ..d.clone() });
                m
            }
        }
    }

    /// Checks every invariant and reports each one separately.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();
        let scale = self.inf_supp.abs().max(self.sup_supp.abs());
        let scale = if scale.is_finite() { scale.max(1.0) } else { 1.0 };
        checks.push(Check::new(
            "normalised",
            (self.total_mass - 1.0).abs() <= MASS_TOL,
            format!("total mass {}", self.total_mass),
        ));
        checks.push(Check::new(
            "centered",
            self.mean.abs() <= MEAN_TOL * scale,
            format!("mean {:e}", self.mean),
        ));
        let degenerate = match &self.kind {
            MeasureKind::Atoms(atoms) => atoms.iter().all(|a| a.x == 0.0),
            MeasureKind::Density(_) => !(self.second_moment > 0.0),
        };
        checks.push(Check::new(
            "non_degenerate",
            !degenerate,
            if degenerate {
                "measure is the point mass at 0".to_string()
            } else {
                format!("second moment {}", self.second_moment)
            },
        ));
        checks.push(Check::new(
            "finite_second_moment",
            self.second_moment.is_finite(),
            format!("second moment {}", self.second_moment),
        ));
        ValidationReport { checks }
    }

    /// The measure itself when valid, otherwise an error naming the failed checks.
    pub fn validated(self) -> Result<Self> {
        let report = self.validate();
        if report.passed() {
            Ok(self)
        } else {
            Err(Error::InvalidMeasure(report.failure_summary()))
        }
    }

    pub fn summary(&self) -> MeasureSummary {
        MeasureSummary {
            kind: match &self.kind {
                MeasureKind::Atoms(a) => format!("atoms({})", a.len()),
                MeasureKind::Density(d) => match d.family {
                    DensityFamily::Uniform { .. } => "uniform".into(),
                    DensityFamily::Normal { .. } => "normal".into(),
                    DensityFamily::ExpRational => "exp_rational".into(),
                },
            },
            inf_supp: self.inf_supp,
            sup_supp: self.sup_supp,
            second_moment: self.second_moment,
            atom_mass_at_inf_supp: self.mass_at_inf,
            atom_mass_at_sup_supp: self.mass_at_sup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn failure_summary(&self) -> String {
        self.failures()
            .map(|c| format!("{} check failed ({})", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub kind: String,
    #[serde(with = "crate::ext_real")]
    pub inf_supp: f64,
    #[serde(with = "crate::ext_real")]
    pub sup_supp: f64,
    #[serde(with = "crate::ext_real")]
    pub second_moment: f64,
    pub atom_mass_at_inf_supp: f64,
    pub atom_mass_at_sup_supp: f64,
}

/// Declarative description of a measure, as written in config files:
/// either `atoms = [[x, w], ...]` or `density = { name = ..., ... }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityFamily>,
}

impl MeasureSpec {
    pub fn rademacher() -> Self {
        Self {
            atoms: Some(vec![[-1.0, 0.5], [1.0, 0.5]]),
            density: None,
        }
    }

    /// Builds and validates the measure.
    pub fn build(&self) -> Result<IncrementMeasure> {
        let m = match (&self.atoms, &self.density) {
            (Some(atoms), None) => {
                let pairs: Vec<(f64, f64)> = atoms.iter().map(|a| (a[0], a[1])).collect();
                IncrementMeasure::from_atoms(&pairs)?
            }
            (None, Some(d)) => IncrementMeasure::from_density(d.clone())?,
            _ => {
                return Err(Error::InvalidMeasure(
                    "exactly one of `atoms` or `density` must be given".into(),
                ))
            }
        };
        m.validated()
    }
}

/// Named shortcuts accepted wherever a measure spec is expected.
pub fn named_measure(name: &str, params: &BTreeMap<String, f64>) -> Result<MeasureSpec> {
    let spec = match name {
        "rademacher" => MeasureSpec::rademacher(),
        "uniform" => {
            let h = params.get("half_width").copied().unwrap_or(1.0);
            MeasureSpec {
                atoms: None,
                density: Some(DensityFamily::Uniform { lo: -h, hi: h }),
            }
        }
        "normal" => MeasureSpec {
            atoms: None,
            density: Some(DensityFamily::Normal {
                sigma: params.get("sigma").copied().unwrap_or(1.0),
            }),
        },
        "exp_rational" => MeasureSpec {
            atoms: None,
            density: Some(DensityFamily::ExpRational),
        },
        other => return Err(Error::InvalidMeasure(format!("unknown measure `{other}`"))),
    };
    Ok(spec)
}
