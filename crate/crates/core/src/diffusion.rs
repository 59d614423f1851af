//! Driftless diffusions `dM = eta(M) dW` on an interval `(l, r)`.
//!
//! A [`DiffusionSpec`] couples a diffusion coefficient with its state
//! interval and starting point. [`QFunction`] evaluates
//!
//! ```text
//! q(y, x) = ∫_y^x ∫_y^u 2 / eta(z)^2 dz du
//! ```
//!
//! and its derivative in `x`, either from a closed form (catalog models) or by
//! adaptive quadrature of the equivalent single integral
//! `∫ |x - z| 2 / eta(z)^2 dz` over the segment between `y` and `x`.
//! [`classify_boundary`] decides numerically whether a finite endpoint is
//! reached in finite time, i.e. whether `q(y, l+)` is finite.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Open state interval `(l, r)` with `l ∈ [-inf, inf)` and `r ∈ (-inf, inf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "crate::ext_real")]
    pub l: f64,
    #[serde(with = "crate::ext_real")]
    pub r: f64,
}

impl Interval {
    pub fn new(l: f64, r: f64) -> Result<Self> {
        if l.is_nan() || r.is_nan() {
            return Err(Error::NonFiniteInput("interval endpoint is NaN".into()));
        }
        if !(l < r) || l == f64::INFINITY || r == f64::NEG_INFINITY {
            return Err(Error::InvalidSpec(format!("invalid interval ({l}, {r})")));
        }
        Ok(Self { l, r })
    }

    pub fn real_line() -> Self {
        Self {
            l: f64::NEG_INFINITY,
            r: f64::INFINITY,
        }
    }

    pub fn positive_half_line() -> Self {
        Self { l: 0.0, r: f64::INFINITY }
    }

    pub fn bound(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.l,
            Side::Right => self.r,
        }
    }

    #[inline]
    pub fn contains_open(&self, x: f64) -> bool {
        x > self.l && x < self.r
    }

    #[inline]
    pub fn contains_closed(&self, x: f64) -> bool {
        x >= self.l && x <= self.r
    }

    pub fn is_finite(&self, side: Side) -> bool {
        self.bound(side).is_finite()
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.l <= other.l && other.r <= self.r
    }

    pub fn reflect(&self) -> Interval {
        Interval { l: -self.r, r: -self.l }
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }
}

/// One analytic atom of a user-defined piecewise coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PieceExpr {
    /// `c`
    Const { c: f64 },
    /// `c * |x - shift|^p`
    Power { c: f64, shift: f64, p: f64 },
    /// `c * exp(k x)`
    Exp { c: f64, k: f64 },
    /// `c * |ln |x - shift||^p`
    LogPower { c: f64, shift: f64, p: f64 },
}

impl PieceExpr {
    fn eval(&self, x: f64) -> f64 {
        match *self {
            PieceExpr::Const { c } => c,
            PieceExpr::Power { c, shift, p } => c * (x - shift).abs().powf(p),
            PieceExpr::Exp { c, k } => c * (k * x).exp(),
            PieceExpr::LogPower { c, shift, p } => c * (x - shift).abs().ln().abs().powf(p),
        }
    }
}

/// Piece covering `(lower, upper]` (the last piece also covers nothing beyond `r`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    #[serde(with = "crate::ext_real")]
    pub lower: f64,
    #[serde(with = "crate::ext_real")]
    pub upper: f64,
    pub expr: PieceExpr,
}

/// Diffusion coefficient families.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    /// `eta ≡ c`; Brownian motion for `c = 1`.
    Constant { c: f64 },
    /// `eta = 1` on `(0, ∞)` and `A` on `(-∞, 0]`.
    TwoMedia { a: f64 },
    /// `eta(x) = x^alpha` on `(0, ∞)`; geometric Brownian motion for `alpha = 1`.
    Power { alpha: f64 },
    /// `eta(x) = exp(-x / 2)` on the real line.
    ExpHalf,
    /// Coefficient on `(0, ∞)` whose `q(y, y + y x)` decays like
    /// `1 / sqrt(-log y)` at the origin although the origin is inaccessible.
    LogExample,
    Piecewise { pieces: Vec<Piece> },
}

const SQRT_LN2: f64 = 0.832_554_611_157_697_8;

impl Coefficient {
    pub fn natural_interval(&self) -> Interval {
        match self {
            Coefficient::Constant { .. } | Coefficient::TwoMedia { .. } | Coefficient::ExpHalf => {
                Interval::real_line()
            }
            Coefficient::Power { .. } | Coefficient::LogExample => Interval::positive_half_line(),
            Coefficient::Piecewise { pieces } => Interval {
                l: pieces.first().map_or(f64::NEG_INFINITY, |p| p.lower),
                r: pieces.last().map_or(f64::INFINITY, |p| p.upper),
            },
        }
    }

    /// `eta(x)` for `x` inside the natural interval.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant { c } => *c,
            Coefficient::TwoMedia { a } => {
                if x > 0.0 {
                    1.0
                } else {
                    *a
                }
            }
            Coefficient::Power { alpha } => x.powf(*alpha),
            Coefficient::ExpHalf => (-0.5 * x).exp(),
            Coefficient::LogExample => {
                if x < 0.5 {
                    let nl = -x.ln();
                    2.0 * std::f64::consts::SQRT_2 * x * nl.powf(0.75) / (2.0 * nl - 1.0).sqrt()
                } else {
                    1.0
                }
            }
            Coefficient::Piecewise { pieces } => {
                let idx = pieces.partition_point(|p| p.upper < x).min(pieces.len() - 1);
                pieces[idx].expr.eval(x)
            }
        }
    }

    /// Points where `eta` is discontinuous or changes formula.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Coefficient::TwoMedia { .. } => vec![0.0],
            Coefficient::LogExample => vec![0.5],
            Coefficient::Piecewise { pieces } => {
                let mut v: Vec<f64> = pieces.iter().skip(1).map(|p| p.lower).collect();
                for p in pieces {
                    if let PieceExpr::Power { shift, .. } | PieceExpr::LogPower { shift, .. } = p.expr {
                        v.push(shift);
                        if let PieceExpr::LogPower { .. } = p.expr {
                            v.push(shift - 1.0);
                            v.push(shift + 1.0);
                        }
                    }
                }
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn has_closed_form(&self) -> bool {
        !matches!(self, Coefficient::Piecewise { .. })
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Coefficient::Constant { c } => Some(*c),
            _ => None,
        }
    }

    /// Closed-form `q(y, x)` for `y` inside and `x` in the closure of the
    /// natural interval (limits at the endpoints).
    pub fn q_closed(&self, y: f64, x: f64) -> Option<f64> {
        let v = match *self {
            Coefficient::Constant { c } => {
                let d = x - y;
                d * d / (c * c)
            }
            Coefficient::TwoMedia { a } => {
                let a2 = a * a;
                if y >= 0.0 {
                    if x >= 0.0 {
                        (x - y) * (x - y)
                    } else {
                        y * y - 2.0 * x * y + x * x / a2
                    }
                } else if x < 0.0 {
                    (x - y) * (x - y) / a2
                } else {
                    (y * y - 2.0 * x * y) / a2 + x * x
                }
            }
            Coefficient::Power { alpha } => q_power(alpha, y, x),
            Coefficient::ExpHalf => {
                let d = x - y;
                2.0 * y.exp() * (d.exp_m1() - d)
            }
            Coefficient::LogExample => {
                if x <= 0.0 {
                    f64::INFINITY
                } else {
                    log_example_q0(x) - log_example_q0(y) - log_example_q0_x(y) * (x - y)
                }
            }
            Coefficient::Piecewise { .. } => return None,
        };
        Some(v.max(0.0))
    }

    /// Closed-form `q_x(y, x) = ∫_y^x 2 / eta^2`.
    pub fn qx_closed(&self, y: f64, x: f64) -> Option<f64> {
        let v = match *self {
            Coefficient::Constant { c } => 2.0 * (x - y) / (c * c),
            Coefficient::TwoMedia { a } => {
                let a2 = a * a;
                match (y >= 0.0, x >= 0.0) {
                    (true, true) => 2.0 * (x - y),
                    (true, false) => -2.0 * y + 2.0 * x / a2,
                    (false, false) => 2.0 * (x - y) / a2,
                    (false, true) => -2.0 * y / a2 + 2.0 * x,
                }
            }
            Coefficient::Power { alpha } => {
                let lr = (x / y).ln();
                if alpha == 0.5 {
                    2.0 * lr
                } else {
                    let e = 1.0 - 2.0 * alpha;
                    2.0 * y.powf(e) * (e * lr).exp_m1() / e
                }
            }
            Coefficient::ExpHalf => 2.0 * y.exp() * (x - y).exp_m1(),
            Coefficient::LogExample => log_example_q0_x(x) - log_example_q0_x(y),
            Coefficient::Piecewise { .. } => return None,
        };
        Some(v)
    }

    /// Whether `limsup |eta(x)| / |x - b|` stays finite as `x -> b` from inside
    /// the interval at a finite boundary `b`, or whether `limsup |eta(x)| / |x|`
    /// stays finite at an infinite boundary. `None` when undecidable from the
    /// catalog description.
    pub fn linear_bound(&self, interval: &Interval, side: Side) -> Option<bool> {
        let b = interval.bound(side);
        let natural = self.natural_interval();
        if b.is_finite() {
            if b != natural.bound(side) {
                // Interior truncation point: eta is continuous and nonzero there
                // for catalog models, so eta / |x - b| blows up.
                return match self {
                    Coefficient::Piecewise { .. } => {
                        let inner = if side == Side::Left { b + 1e-9 } else { b - 1e-9 };
                        Some(self.eval(inner).abs() <= 1e-12)
                    }
                    _ => Some(false),
                };
            }
            match self {
                Coefficient::Power { alpha } => Some(*alpha >= 1.0),
                Coefficient::LogExample => Some(false),
                Coefficient::Piecewise { pieces } => {
                    let piece = if side == Side::Left { pieces.first() } else { pieces.last() }?;
                    match piece.expr {
                        PieceExpr::Power { shift, p, .. } if shift == b => Some(p >= 1.0),
                        PieceExpr::Const { .. } | PieceExpr::Exp { .. } => Some(false),
                        _ => None,
                    }
                }
                _ => None,
            }
        } else {
            match self {
                Coefficient::Constant { .. } | Coefficient::TwoMedia { .. } | Coefficient::LogExample => Some(true),
                Coefficient::Power { alpha } => Some(*alpha <= 1.0),
                Coefficient::ExpHalf => Some(side == Side::Right),
                Coefficient::Piecewise { pieces } => {
                    let piece = if side == Side::Left { pieces.first() } else { pieces.last() }?;
                    match piece.expr {
                        PieceExpr::Const { .. } | PieceExpr::LogPower { .. } => Some(true),
                        PieceExpr::Power { p, .. } => Some(p <= 1.0),
                        PieceExpr::Exp { k, .. } => Some(if side == Side::Right { k <= 0.0 } else { k >= 0.0 }),
                    }
                }
            }
        }
    }

    /// `sup |eta|` over the interval when a catalog bound is known.
    pub fn sup_abs(&self, interval: &Interval) -> Option<f64> {
        match *self {
            Coefficient::Constant { c } => Some(c.abs()),
            Coefficient::TwoMedia { a } => {
                let mut s: f64 = 0.0;
                if interval.r > 0.0 {
                    s = s.max(1.0);
                }
                if interval.l < 0.0 {
                    s = s.max(a.abs());
                }
                Some(s)
            }
            Coefficient::Power { alpha } => {
                let v = if alpha >= 0.0 { interval.r.powf(alpha) } else { interval.l.powf(alpha) };
                v.is_finite().then_some(v)
            }
            Coefficient::ExpHalf => {
                let v = (-0.5 * interval.l).exp();
                v.is_finite().then_some(v)
            }
            _ => None,
        }
    }
}

fn q_power(alpha: f64, y: f64, x: f64) -> f64 {
    if x < 0.0 {
        return f64::INFINITY;
    }
    if alpha == 1.0 {
        if x == 0.0 {
            return f64::INFINITY;
        }
        let u = x / y - 1.0;
        return 2.0 * (u - u.ln_1p());
    }
    if alpha == 0.5 {
        if x == 0.0 {
            return 2.0 * y;
        }
        return 2.0 * x * (x / y).ln() - 2.0 * (x - y);
    }
    let p = 2.0 - 2.0 * alpha;
    let r = x / y;
    let scale = 2.0 * y.powf(p) / (2.0 * alpha - 1.0);
    if x == 0.0 {
        return if p < 0.0 { f64::INFINITY } else { scale * (1.0 / p - 1.0) };
    }
    let e = (p * r.ln()).exp_m1() / p;
    scale * ((r - 1.0) - e)
}

/// `q(1/2, x)` for the log example.
fn log_example_q0(x: f64) -> f64 {
    if x < 0.5 {
        (-x.ln()).sqrt() + (x - 0.5) / SQRT_LN2 - SQRT_LN2
    } else {
        (x - 0.5) * (x - 0.5)
    }
}

fn log_example_q0_x(x: f64) -> f64 {
    if x < 0.5 {
        -0.5 / (x * (-x.ln()).sqrt()) + 1.0 / SQRT_LN2
    } else {
        2.0 * x - 1.0
    }
}

/// The diffusion under study: coefficient, state interval and start point.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    name: String,
    interval: Interval,
    coefficient: Coefficient,
    start: f64,
    reflected: bool,
}

/// Number of probe points used to check `eta ≠ 0` at construction.
const ETA_PROBES: usize = 257;

impl DiffusionSpec {
    /// Builds and validates a spec. `interval` defaults to the coefficient's
    /// natural interval and must lie inside it.
    pub fn new(
        name: impl Into<String>,
        coefficient: Coefficient,
        interval: Option<Interval>,
        start: f64,
    ) -> Result<Self> {
        let natural = coefficient.natural_interval();
        let interval = interval.unwrap_or(natural);
        Interval::new(interval.l, interval.r)?;
        if !natural.contains_interval(&interval) {
            return Err(Error::InvalidSpec(format!(
                "interval ({}, {}) exceeds the coefficient's domain ({}, {})",
                interval.l, interval.r, natural.l, natural.r
            )));
        }
        if start.is_nan() {
            return Err(Error::NonFiniteInput("start point is NaN".into()));
        }
        if !interval.contains_open(start) {
            return Err(Error::InvalidSpec(format!(
                "start point {start} is not inside ({}, {})",
                interval.l, interval.r
            )));
        }
        if let Coefficient::Piecewise { pieces } = &coefficient {
            validate_pieces(pieces)?;
        }
        if let Coefficient::TwoMedia { a } | Coefficient::Constant { c: a } = coefficient {
            if a == 0.0 || !a.is_finite() {
                return Err(Error::InvalidSpec(format!("coefficient constant must be finite and nonzero, got {a}")));
            }
        }
        let spec = Self {
            name: name.into(),
            interval,
            coefficient,
            start,
            reflected: false,
        };
        spec.check_nonzero()?;
        if !spec.coefficient.has_closed_form() {
            spec.check_local_integrability()?;
        }
        Ok(spec)
    }

    /// Catalog lookup by name. Recognised names: `bm`, `two_media` (param
    /// `A`), `gbm`, `cev` (param `alpha`), `exp_half`, `log_example`,
    /// `absorbed_bm` (Brownian motion on `(0, ∞)`).
    pub fn from_catalog(
        name: &str,
        params: &BTreeMap<String, f64>,
        interval: Option<Interval>,
        start: f64,
    ) -> Result<Self> {
        let param = |key: &str| -> Result<f64> {
            params
                .get(key)
                .copied()
                .ok_or_else(|| Error::InvalidSpec(format!("model `{name}` needs parameter `{key}`")))
        };
        let allowed: &[&str] = match name {
            "two_media" => &["A"],
            "cev" => &["alpha"],
            "bm" | "absorbed_bm" => &["c"],
            _ => &[],
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidSpec(format!("model `{name}` has no parameter `{k}`")));
        }
        let (coefficient, default_interval) = match name {
            "bm" => (
                Coefficient::Constant {
                    c: params.get("c").copied().unwrap_or(1.0),
                },
                None,
            ),
            "absorbed_bm" => (
                Coefficient::Constant {
                    c: params.get("c").copied().unwrap_or(1.0),
                },
                Some(Interval::positive_half_line()),
            ),
            "two_media" => (Coefficient::TwoMedia { a: param("A")? }, None),
            "gbm" => (Coefficient::Power { alpha: 1.0 }, None),
            "cev" => {
                let alpha = param("alpha")?;
                if !alpha.is_finite() {
                    return Err(Error::InvalidSpec("cev alpha must be finite".into()));
                }
                (Coefficient::Power { alpha }, None)
            }
            "exp_half" => (Coefficient::ExpHalf, None),
            "log_example" => (Coefficient::LogExample, None),
            other => return Err(Error::UnsupportedModel(format!("unknown catalog model `{other}`"))),
        };
        Self::new(name, coefficient, interval.or(default_interval), start)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn coefficient(&self) -> &Coefficient {
        &self.coefficient
    }

    pub fn is_reflected(&self) -> bool {
        self.reflected
    }

    /// Spec of `-M`: interval, start point and coefficient mirrored.
    pub fn reflect(&self) -> DiffusionSpec {
        DiffusionSpec {
            name: format!("reflected({})", self.name),
            interval: self.interval.reflect(),
            coefficient: self.coefficient.clone(),
            start: -self.start,
            reflected: !self.reflected,
        }
    }

    /// Same model with a different start point.
    pub fn with_start(&self, start: f64) -> Result<DiffusionSpec> {
        if !self.interval.contains_open(start) {
            return Err(Error::Domain(format!("start {start} outside the state interval")));
        }
        Ok(DiffusionSpec { start, ..self.clone() })
    }

    #[inline]
    fn base(&self, x: f64) -> f64 {
        if self.reflected {
            -x
        } else {
            x
        }
    }

    /// `eta(x)`; zero outside the open interval.
    pub fn eta(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::NonFiniteInput("eta evaluated at NaN".into()));
        }
        Ok(self.eta_unchecked(x))
    }

    /// `eta(x)` without the NaN check, for inner loops.
    #[inline]
    pub fn eta_unchecked(&self, x: f64) -> f64 {
        if !self.interval.contains_open(x) {
            return 0.0;
        }
        self.coefficient.eval(self.base(x))
    }

    /// Breakpoints of `eta` inside the interval, in spec coordinates.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .coefficient
            .breakpoints()
            .into_iter()
            .map(|b| self.base(b))
            .filter(|&b| self.interval.contains_open(b))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn has_closed_form(&self) -> bool {
        self.coefficient.has_closed_form()
    }

    fn q_closed(&self, y: f64, x: f64) -> Option<f64> {
        self.coefficient.q_closed(self.base(y), self.base(x))
    }

    fn qx_closed(&self, y: f64, x: f64) -> Option<f64> {
        let v = self.coefficient.qx_closed(self.base(y), self.base(x))?;
        Some(if self.reflected { -v } else { v })
    }

    /// Catalog-level answer to the linear growth condition at one side.
    pub fn linear_bound(&self, side: Side) -> Option<bool> {
        if self.reflected {
            self.coefficient.linear_bound(&self.interval.reflect(), side.opposite())
        } else {
            self.coefficient.linear_bound(&self.interval, side)
        }
    }

    /// Known upper bound of `|eta|` on the interval.
    pub fn eta_sup(&self) -> Option<f64> {
        let iv = if self.reflected { self.interval.reflect() } else { self.interval };
        self.coefficient.sup_abs(&iv)
    }

    fn probe_points(&self) -> Vec<f64> {
        let Interval { l, r } = self.interval;
        (1..ETA_PROBES)
            .map(|i| {
                let t = i as f64 / ETA_PROBES as f64;
                match (l.is_finite(), r.is_finite()) {
                    (true, true) => l + t * (r - l),
                    (true, false) => l + t / (1.0 - t),
                    (false, true) => r - (1.0 - t) / t,
                    (false, false) => (std::f64::consts::PI * (t - 0.5)).tan(),
                }
            })
            .filter(|x| self.interval.contains_open(*x))
            .collect()
    }

    fn check_nonzero(&self) -> Result<()> {
        for x in self.probe_points() {
            let e = self.eta_unchecked(x);
            if e == 0.0 || !e.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "eta({x}) = {e}: the coefficient must be finite and nonzero inside the interval"
                )));
            }
        }
        Ok(())
    }

    /// Integrates `1/eta^2` over compact windows around every probe point and
    /// breakpoint; a divergent window means `1/eta^2` is not locally integrable.
    fn check_local_integrability(&self) -> Result<()> {
        let mut pts = self.probe_points();
        pts.extend(self.breakpoints());
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let cfg = QuadConfig {
            rel_tol: 1e-6,
            ..QuadConfig::default()
        };
        let breaks = self.breakpoints();
        for w in pts.windows(2) {
            let v = integrate(
                |z| {
                    let e = self.eta_unchecked(z);
                    1.0 / (e * e)
                },
                w[0],
                w[1],
                &breaks,
                &cfg,
            );
            match v {
                Ok(v) if v.is_finite() => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "1/eta^2 is not integrable on [{}, {}]",
                        w[0], w[1]
                    )))
                }
            }
        }
        Ok(())
    }
}

fn validate_pieces(pieces: &[Piece]) -> Result<()> {
    if pieces.is_empty() {
        return Err(Error::InvalidSpec("piecewise coefficient needs at least one piece".into()));
    }
    for p in pieces {
        if !(p.lower < p.upper) {
            return Err(Error::InvalidSpec(format!("empty piece ({}, {}]", p.lower, p.upper)));
        }
        let c = match p.expr {
            PieceExpr::Const { c } | PieceExpr::Power { c, .. } | PieceExpr::Exp { c, .. } | PieceExpr::LogPower { c, .. } => c,
        };
        if c == 0.0 || !c.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "piece ({}, {}] vanishes identically; eta must be nonzero inside the interval",
                p.lower, p.upper
            )));
        }
    }
    for w in pieces.windows(2) {
        if w[0].upper != w[1].lower {
            return Err(Error::InvalidSpec(format!(
                "pieces must be contiguous: {} != {}",
                w[0].upper, w[1].lower
            )));
        }
    }
    Ok(())
}

/// How `q` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QMethod {
    /// Closed form when the model provides one, quadrature otherwise.
    #[default]
    Auto,
    /// Always integrate numerically.
    Quadrature,
}

/// Evaluator of `q(y, x)` and `q_x(y, x)` for one diffusion.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct QFunction {
    spec: Arc<DiffusionSpec>,
    reference_point: f64,
    method: QMethod,
    quad: QuadConfig,
}

impl QFunction {
    pub fn new(spec: DiffusionSpec) -> Self {
        let reference_point = spec.start();
        Self {
            spec: Arc::new(spec),
            reference_point,
            method: QMethod::Auto,
            quad: QuadConfig::default(),
        }
    }

    pub fn with_method(mut self, method: QMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_tol(mut self, rel_tol: f64) -> Self {
        self.quad.rel_tol = rel_tol;
        self
    }

    pub fn tol(&self) -> f64 {
        self.quad.rel_tol
    }

    pub fn method(&self) -> QMethod {
        self.method
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn interval(&self) -> Interval {
        self.spec.interval()
    }

    /// Default base point `y₀` for translating `q` between base points.
    pub fn reference_point(&self) -> f64 {
        self.reference_point
    }

    /// Evaluator for `-M`.
    pub fn reflect(&self) -> QFunction {
        QFunction {
            spec: Arc::new(self.spec.reflect()),
            reference_point: -self.reference_point,
            method: self.method,
            quad: self.quad,
        }
    }

    fn check_base(&self, y: f64, x: f64) -> Result<()> {
        if y.is_nan() || x.is_nan() {
            return Err(Error::NonFiniteInput("q evaluated at NaN".into()));
        }
        let iv = self.interval();
        if !iv.contains_open(y) {
            return Err(Error::Domain(format!("base point {y} outside ({}, {})", iv.l, iv.r)));
        }
        Ok(())
    }

    fn use_closed_form(&self) -> bool {
        self.method == QMethod::Auto && self.spec.has_closed_form()
    }

    /// `q(y, x)`; `+inf` outside `[l, r]`, the one-sided limit at finite
    /// endpoints.
    pub fn q_eval(&self, y: f64, x: f64) -> Result<f64> {
        self.check_base(y, x)?;
        if x == y {
            return Ok(0.0);
        }
        let iv = self.interval();
        if !iv.contains_closed(x) {
            return Ok(f64::INFINITY);
        }
        if x.is_infinite() {
            return Ok(f64::INFINITY);
        }
        if self.use_closed_form() {
            return Ok(self.spec.q_closed(y, x).unwrap_or(f64::INFINITY));
        }
        self.q_quadrature(y, x)
    }

    fn q_quadrature(&self, y: f64, x: f64) -> Result<f64> {
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        let breaks = self.spec.breakpoints();
        let spec = &self.spec;
        integrate(
            |z| {
                let e = spec.eta_unchecked(z);
                2.0 * (x - z).abs() / (e * e)
            },
            lo,
            hi,
            &breaks,
            &self.quad,
        )
    }

    /// `q_x(y, x) = ∫_y^x 2 / eta^2`, for `x, y` inside the interval.
    pub fn q_x_eval(&self, y: f64, x: f64) -> Result<f64> {
        self.check_base(y, x)?;
        if x == y {
            return Ok(0.0);
        }
        let iv = self.interval();
        if !iv.contains_open(x) {
            return Err(Error::Domain(format!("q_x needs x inside ({}, {}), got {x}", iv.l, iv.r)));
        }
        if self.use_closed_form() {
            if let Some(v) = self.spec.qx_closed(y, x) {
                return Ok(v);
            }
        }
        let (lo, hi, sign) = if x < y { (x, y, -1.0) } else { (y, x, 1.0) };
        let breaks = self.spec.breakpoints();
        let spec = &self.spec;
        let v = integrate(
            |z| {
                let e = spec.eta_unchecked(z);
                2.0 / (e * e)
            },
            lo,
            hi,
            &breaks,
            &self.quad,
        )?;
        Ok(sign * v)
    }
}

/// Probe settings for [`classify_boundary`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundaryProbe {
    pub divergence_cap: f64,
    pub max_probes: usize,
    pub cauchy_tol: f64,
    /// Consecutive increment ratios at or above `slow_ratio` that count as
    /// evidence of a divergent, sub-geometric tail.
    pub slow_ratio: f64,
    pub slow_window: usize,
}

impl Default for BoundaryProbe {
    fn default() -> Self {
        Self {
            divergence_cap: 1e12,
            max_probes: 60,
            cauchy_tol: 1e-10,
            slow_ratio: 0.98,
            slow_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub x: f64,
    #[serde(with = "crate::ext_real")]
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCriterion {
    /// The endpoint is infinite; `q(y, ±inf) = inf` always.
    InfiniteEndpoint,
    /// Probe values exceeded the divergence cap.
    CapExceeded,
    /// Increments stayed comparable in size instead of decaying geometrically.
    SlowIncrements,
    /// Increments fell below the Cauchy tolerance.
    Cauchy,
}

/// Feller-type accessibility verdict for one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub side: Side,
    #[serde(with = "crate::ext_real")]
    pub boundary: f64,
    pub base: f64,
    #[serde(with = "crate::ext_real")]
    pub limit_value: f64,
    pub accessible: bool,
    /// False only for the analytic infinite-endpoint verdict.
    pub heuristic: bool,
    pub criterion: BoundaryCriterion,
    pub probe_trace: Vec<ProbePoint>,
}

/// Classifies the boundary on `side` using the start point as base.
pub fn classify_boundary(qf: &QFunction, side: Side) -> Result<BoundaryReport> {
    classify_boundary_from(qf, side, qf.spec().start(), &BoundaryProbe::default())
}

/// Probes `q(base, x_k)` along `x_k = b + (base - b) 2^-k` toward the
/// endpoint `b`.
pub fn classify_boundary_from(
    qf: &QFunction,
    side: Side,
    base: f64,
    probe: &BoundaryProbe,
) -> Result<BoundaryReport> {
    let iv = qf.interval();
    if !iv.contains_open(base) {
        return Err(Error::Domain(format!("probe base {base} outside the interval")));
    }
    let b = iv.bound(side);
    let mut report = BoundaryReport {
        side,
        boundary: b,
        base,
        limit_value: f64::INFINITY,
        accessible: false,
        heuristic: true,
        criterion: BoundaryCriterion::InfiniteEndpoint,
        probe_trace: Vec::new(),
    };
    if b.is_infinite() {
        report.heuristic = false;
        return Ok(report);
    }

    let mut prev_q = 0.0;
    let mut prev_inc = f64::NAN;
    let mut cauchy_hits = 0;
    let mut slow_hits = 0;
    let mut probes = 0;
    for k in 1..=probe.max_probes {
        let x = b + (base - b) * 0.5f64.powi(k as i32);
        if x == b || !iv.contains_open(x) {
            break;
        }
        probes = k;
        let q = match qf.q_eval(base, x) {
            Ok(q) => q,
            Err(Error::QuadratureDivergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        report.probe_trace.push(ProbePoint { x, q });
        let inc = q - prev_q;
        if q > probe.divergence_cap && inc > 0.0 {
            report.criterion = BoundaryCriterion::CapExceeded;
            return Ok(report);
        }
        if k >= 2 {
            if inc.abs() <= probe.cauchy_tol * (1.0 + q.abs()) {
                cauchy_hits += 1;
                if cauchy_hits >= 3 {
                    report.limit_value = q;
                    report.accessible = true;
                    report.criterion = BoundaryCriterion::Cauchy;
                    return Ok(report);
                }
            } else {
                cauchy_hits = 0;
            }
            if prev_inc > 0.0 && inc / prev_inc >= probe.slow_ratio {
                slow_hits += 1;
            } else {
                slow_hits = 0;
            }
            if slow_hits >= probe.slow_window && k >= 2 * probe.slow_window {
                report.criterion = BoundaryCriterion::SlowIncrements;
                return Ok(report);
            }
        }
        prev_inc = inc;
        prev_q = q;
    }
    Err(Error::Inconclusive { side, probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(name: &str, params: &[(&str, f64)], interval: Option<Interval>, m: f64) -> DiffusionSpec {
        let p = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        DiffusionSpec::from_catalog(name, &p, interval, m).unwrap()
    }

    #[test]
    fn eta_examples() {
        let two = cat("two_media", &[("A", 2.0)], None, 0.0);
        assert_eq!(two.eta(-1.0).unwrap(), 2.0);
        assert_eq!(two.eta(0.0).unwrap(), 2.0);
        assert_eq!(two.eta(0.5).unwrap(), 1.0);
        let gbm = cat("gbm", &[], None, 1.0);
        assert_eq!(gbm.eta(-0.5).unwrap(), 0.0);
        assert_eq!(gbm.eta(0.0).unwrap(), 0.0);
        let bm = cat("bm", &[], None, 0.0);
        assert_eq!(bm.eta(3.7).unwrap(), 1.0);
        assert!(matches!(bm.eta(f64::NAN), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn q_examples() {
        let bm = QFunction::new(cat("bm", &[], None, 0.0));
        assert_eq!(bm.q_eval(0.0, 2.0).unwrap(), 4.0);
        assert_eq!(bm.q_x_eval(0.0, 2.0).unwrap(), 4.0);
        let gbm = QFunction::new(cat("gbm", &[], None, 1.0));
        let e = std::f64::consts::E;
        assert!((gbm.q_eval(1.0, e).unwrap() - (2.0 * e - 4.0)).abs() < 1e-14);
        assert_eq!(gbm.q_eval(1.0, -0.1).unwrap(), f64::INFINITY);
        assert_eq!(gbm.q_eval(1.0, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(gbm.q_eval(0.7, 0.7).unwrap(), 0.0);
        let two = QFunction::new(cat("two_media", &[("A", 2.0)], None, 0.0));
        assert!((two.q_x_eval(0.0, -1.0).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let gbm = QFunction::new(cat("gbm", &[], None, 1.0));
        assert!(matches!(gbm.q_eval(-1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(gbm.q_eval(1.0, f64::NAN), Err(Error::NonFiniteInput(_))));
        assert!(matches!(gbm.q_x_eval(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quadrature_matches_gbm_closed_form() {
        let gbm = QFunction::new(cat("gbm", &[], None, 1.0));
        let quad = gbm.clone().with_method(QMethod::Quadrature);
        let e = std::f64::consts::E;
        let want = 2.0 * e - 4.0;
        assert!((quad.q_eval(1.0, e).unwrap() - want).abs() < 1e-9 * want);
    }

    #[test]
    fn cev_boundary_limits() {
        let half = QFunction::new(cat("cev", &[("alpha", 0.5)], None, 1.0));
        assert!((half.q_eval(1.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        let two = QFunction::new(cat("cev", &[("alpha", 2.0)], None, 1.0));
        assert_eq!(two.q_eval(1.0, 0.0).unwrap(), f64::INFINITY);
        let neg = QFunction::new(cat("cev", &[("alpha", -1.0)], None, 1.0));
        assert!((neg.q_eval(2.0, 0.0).unwrap() - 8.0).abs() < 1e-12);
        let abs_bm = QFunction::new(cat("absorbed_bm", &[], None, 1.0));
        assert_eq!(abs_bm.q_eval(0.3, 0.0).unwrap(), 0.09);
    }

    #[test]
    fn boundary_classification_examples() {
        let cev2 = QFunction::new(cat("cev", &[("alpha", 2.0)], None, 1.0));
        assert!(!classify_boundary(&cev2, Side::Left).unwrap().accessible);
        let cev_half = QFunction::new(cat("cev", &[("alpha", 0.5)], None, 1.0));
        let rep = classify_boundary(&cev_half, Side::Left).unwrap();
        assert!(rep.accessible);
        assert!((rep.limit_value - 2.0).abs() < 1e-8);
        let bm = QFunction::new(cat("bm", &[], None, 0.0));
        let rep = classify_boundary(&bm, Side::Left).unwrap();
        assert!(!rep.accessible && rep.limit_value.is_infinite() && !rep.heuristic);
        let gbm = QFunction::new(cat("gbm", &[], None, 1.0));
        let rep = classify_boundary(&gbm, Side::Left).unwrap();
        assert!(!rep.accessible);
        assert_eq!(rep.criterion, BoundaryCriterion::SlowIncrements);
        let log = QFunction::new(cat("log_example", &[], None, 0.25));
        assert!(!classify_boundary(&log, Side::Left).unwrap().accessible);
    }

    #[test]
    fn boundary_verdict_independent_of_base() {
        for (name, params, acc) in [
            ("cev", vec![("alpha", 0.5)], true),
            ("cev", vec![("alpha", 2.0)], false),
            ("gbm", vec![], false),
            ("absorbed_bm", vec![], true),
        ] {
            let qf = QFunction::new(cat(name, &params, None, 1.0));
            for base in [0.3, 2.5] {
                let rep = classify_boundary_from(&qf, Side::Left, base, &BoundaryProbe::default()).unwrap();
                assert_eq!(rep.accessible, acc, "{name} base {base}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let zero = Coefficient::Piecewise {
            pieces: vec![
                Piece {
                    lower: f64::NEG_INFINITY,
                    upper: 0.0,
                    expr: PieceExpr::Const { c: 1.0 },
                },
                Piece {
                    lower: 0.0,
                    upper: f64::INFINITY,
                    expr: PieceExpr::Const { c: 0.0 },
                },
            ],
        };
        assert!(DiffusionSpec::new("z", zero, None, -1.0).is_err());
        let singular = Coefficient::Piecewise {
            pieces: vec![Piece {
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
                expr: PieceExpr::Power { c: 1.0, shift: 0.5, p: 1.0 },
            }],
        };
        assert!(matches!(
            DiffusionSpec::new("s", singular, None, 0.0),
            Err(Error::InvalidSpec(_))
        ));
        assert!(DiffusionSpec::from_catalog("gbm", &BTreeMap::new(), None, -1.0).is_err());
        assert!(DiffusionSpec::from_catalog(
            "gbm",
            &BTreeMap::new(),
            Some(Interval { l: -1.0, r: 1.0 }),
            0.5
        )
        .is_err());
    }

    #[test]
    fn reflection_mirrors_q() {
        let cev = QFunction::new(cat("cev", &[("alpha", 0.5)], None, 1.0));
        let refl = cev.reflect();
        assert_eq!(refl.interval().r, 0.0);
        for &(y, x) in &[(1.0, 0.5), (2.0, 3.0), (0.7, 0.0)] {
            let a = cev.q_eval(y, x).unwrap();
            let b = refl.q_eval(-y, -x).unwrap();
            assert!((a - b).abs() <= 1e-15 * a.max(1.0));
            if x > 0.0 {
                assert!((cev.q_x_eval(y, x).unwrap() + refl.q_x_eval(-y, -x).unwrap()).abs() < 1e-14);
            }
        }
        assert_eq!(refl.spec().eta(-2.0).unwrap(), 2f64.sqrt());
    }
}
