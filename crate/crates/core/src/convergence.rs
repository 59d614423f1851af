//! Monte Carlo experiments for the limit theorems: the weak law of large
//! numbers for the step durations, the drift of the embedding times towards
//! the clock, and convergence of the walk's marginals to the diffusion's.
//!
//! Every experiment is deterministic given its seed: replica `i` at the
//! `j`-th value of `N` draws from stream `(seed, j << 40 | i)`, and results
//! are merged in stream order.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{Coefficient, DiffusionSpec};
use crate::embedding::{
    coupled_sup_distance, simulate_coupled_walk, simulate_embedded_walk, BridgeFunction, EmbeddedPath, TimeGrid,
};
use crate::error::{Error, Result};
use crate::normal;
use crate::rng::{RngStream, Uniforms};
use crate::scale::ScaleSolver;
use crate::walk::{simulate_endpoint, MemoScale};

fn stream(seed: u64, group: usize, replica: usize) -> RngStream {
    RngStream::new(seed, ((group as u64) << 40) | replica as u64)
}

/// Two-sided Kolmogorov–Smirnov distance between the empirical law of a
/// sorted sample and a reference CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Domain("KS statistic of an empty sample".into()));
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFiniteInput("NaN in KS sample".into()));
    }
    if let Some(i) = sample.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::UnsortedInput(i + 1));
    }
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// `∫ |F - G| dx` between the empirical laws of two sorted samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    for (k, s) in [a, b].iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Domain(format!("sample {k} is empty")));
        }
        if let Some(i) = s.windows(2).position(|w| !(w[0] <= w[1])) {
            return Err(Error::UnsortedInput(i + 1));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x_prev = a[0].min(b[0]);
    let mut acc = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        acc += (i as f64 / na - j as f64 / nb).abs() * (x - x_prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        x_prev = x;
    }
    Ok(acc)
}

/// Where a reference law comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    EulerOracle,
}

/// Whether [`reference_marginal`] may fall back to simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Closed forms only; other models are an error.
    Exact,
    /// Closed form when available, Euler oracle otherwise.
    Auto,
}

/// Settings of the Euler–Maruyama reference simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub step: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for EulerConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            paths: 40_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
enum RefLaw {
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Empirical(Arc<Vec<f64>>),
}

/// Law of `M_t` for a diffusion started at its start point.
#[derive(Debug, Clone)]
pub struct ReferenceMarginal {
    pub provenance: Provenance,
    law: RefLaw,
}

impl ReferenceMarginal {
    pub fn cdf(&self, x: f64) -> f64 {
        match &self.law {
            RefLaw::Normal { mean, sd } => normal::cdf((x - mean) / sd),
            RefLaw::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal::cdf((x.ln() - mu) / sigma)
                }
            }
            RefLaw::Empirical(s) => s.partition_point(|&v| v <= x) as f64 / s.len() as f64,
        }
    }

    /// Oracle samples, when the law is empirical.
    pub fn samples(&self) -> Option<&[f64]> {
        match &self.law {
            RefLaw::Empirical(s) => Some(s),
            _ => None,
        }
    }
}

/// Reference law of `M_t`: normal for constant coefficients on the line,
/// lognormal for geometric Brownian motion, otherwise (in
/// [`ReferenceMode::Auto`]) the empirical law of an Euler scheme with
/// absorption at finite boundaries.
pub fn reference_marginal(
    spec: &DiffusionSpec,
    t: f64,
    mode: ReferenceMode,
    euler: &EulerConfig,
) -> Result<ReferenceMarginal> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("reference time must be positive, got {t}")));
    }
    let m = spec.start();
    let iv = spec.interval();
    let exact = if spec.is_reflected() {
        None
    } else {
        match spec.coefficient() {
            Coefficient::Constant { c } if iv.l == f64::NEG_INFINITY && iv.r == f64::INFINITY => Some(RefLaw::Normal {
                mean: m,
                sd: c.abs() * t.sqrt(),
            }),
            Coefficient::Power { alpha } if *alpha == 1.0 && iv.l == 0.0 && iv.r == f64::INFINITY => {
                Some(RefLaw::LogNormal {
                    mu: m.ln() - 0.5 * t,
                    sigma: t.sqrt(),
                })
            }
            _ => None,
        }
    };
    if let Some(law) = exact {
        return Ok(ReferenceMarginal {
            provenance: Provenance::Exact,
            law,
        });
    }
    if mode == ReferenceMode::Exact {
        return Err(Error::UnsupportedModel(format!("no closed-form marginal for `{}`", spec.name())));
    }
    let samples = euler_samples(spec, t, euler)?;
    Ok(ReferenceMarginal {
        provenance: Provenance::EulerOracle,
        law: RefLaw::Empirical(Arc::new(samples)),
    })
}

/// Sorted Euler–Maruyama samples of `M_t`, absorbed at finite boundaries.
pub fn euler_samples(spec: &DiffusionSpec, t: f64, cfg: &EulerConfig) -> Result<Vec<f64>> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) || cfg.paths == 0 {
        return Err(Error::Domain(format!("invalid Euler settings {cfg:?}")));
    }
    let steps = (t / cfg.step).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let sq = h.sqrt();
    let iv = spec.interval();
    let m = spec.start();
    let mut out: Vec<f64> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(cfg.seed, i as u64);
            let mut x = m;
            for _ in 0..steps {
                x += spec.eta_unchecked(x) * sq * rng.normal();
                if x <= iv.l {
                    x = iv.l;
                    break;
                }
                if x >= iv.r {
                    x = iv.r;
                    break;
                }
            }
            x
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Metric reported by an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ks,
    Wasserstein1,
    SupPathDistance,
    DeviationProbability,
}

/// Outcome of one experiment across a list of `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub experiment_id: String,
    #[serde(rename = "N_values")]
    pub n_values: Vec<u64>,
    pub sample_size: usize,
    pub metric: Metric,
    pub values: Vec<f64>,
    /// Values strictly decrease along `N_values` (vacuous for one entry).
    pub monotone_trend: bool,
    pub config_hash: String,
}

impl ConvergenceReport {
    pub fn new(
        experiment_id: impl Into<String>,
        n_values: Vec<u64>,
        sample_size: usize,
        metric: Metric,
        values: Vec<f64>,
        config: &impl Serialize,
    ) -> Self {
        let monotone_trend = strictly_decreasing(&values);
        Self {
            experiment_id: experiment_id.into(),
            n_values,
            sample_size,
            metric,
            values,
            monotone_trend,
            config_hash: config_hash(config),
        }
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of `config`.
pub fn config_hash(config: &impl Serialize) -> String {
    let value = serde_json::to_value(config).expect("configs serialise to JSON");
    let text = serde_json::to_string(&value).expect("JSON values serialise");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Triangular array for the law of large numbers: row `n` has `n` entries.
#[derive(Debug, Clone)]
pub enum ArraySpec {
    Constant { value: f64 },
    /// I.i.d. exponential entries.
    Exponential { mean: f64 },
    /// `min(1/U, n)` for uniform `U`: Pareto(1) clipped at the row length,
    /// mean `1 + ln n`. Not uniformly integrable.
    ClippedPareto,
    /// `n rho_k`, the rescaled durations of an `n`-step embedded walk with
    /// `N = n`; mean one.
    EmbeddedDurations(EmbeddedArray),
}

/// Diffusion, increment law and grid behind [`ArraySpec::EmbeddedDurations`].
#[derive(Debug, Clone)]
pub struct EmbeddedArray {
    pub solver: ScaleSolver,
    pub grid: TimeGrid,
    pub start: f64,
}

impl ArraySpec {
    /// JSON description used for the config hash.
    pub fn describe(&self) -> serde_json::Value {
        match self {
            ArraySpec::Constant { value } => serde_json::json!({ "kind": "constant", "value": value }),
            ArraySpec::Exponential { mean } => serde_json::json!({ "kind": "exponential", "mean": mean }),
            ArraySpec::ClippedPareto => serde_json::json!({ "kind": "clipped_pareto" }),
            ArraySpec::EmbeddedDurations(e) => serde_json::json!({
                "kind": "embedded_durations",
                "model": e.solver.qf().spec().name(),
                "start": e.start,
                "measure": e.solver.mu().summary(),
                "solver": e.solver.config(),
                "grid": e.grid,
            }),
        }
    }

    fn row_mean(&self, n: u64) -> f64 {
        match self {
            ArraySpec::Constant { value } => *value,
            ArraySpec::Exponential { mean } => *mean,
            ArraySpec::ClippedPareto => 1.0 + (n as f64).ln(),
            ArraySpec::EmbeddedDurations(_) => 1.0,
        }
    }
}

/// Estimates `P(|(1/n) Σ_k (Z^n_k - E Z^n_k)| > epsilon)` for each `n`.
pub fn lln_experiment(
    array: &ArraySpec,
    n_values: &[u64],
    epsilon: f64,
    reps: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if reps == 0 || n_values.contains(&0) {
        return Err(Error::Domain("reps and every n must be positive".into()));
    }
    let mut values = Vec::with_capacity(n_values.len());
    for (j, &n) in n_values.iter().enumerate() {
        let mean = array.row_mean(n);
        let embedded = match array {
            ArraySpec::EmbeddedDurations(e) => {
                Some((MemoScale::new(e.solver.clone(), n)?, BridgeFunction::new(e.solver.mu().clone())))
            }
            _ => None,
        };
        let hits = (0..reps)
            .into_par_iter()
            .map(|i| -> Result<bool> {
                let mut rng = stream(seed, j, i);
                let avg = match (array, &embedded) {
                    (ArraySpec::EmbeddedDurations(e), Some((provider, bf))) => {
                        let path = simulate_embedded_walk(e.solver.qf(), bf, provider, e.start, n as usize, &mut rng, &e.grid)?;
                        path.taus[n as usize]
                    }
                    _ => {
                        let mut acc = 0.0;
                        for _ in 0..n {
                            acc += draw(array, n, &mut rng);
                        }
                        acc / n as f64
                    }
                };
                Ok((avg - mean).abs() > epsilon)
            })
            .collect::<Result<Vec<bool>>>()?;
        values.push(hits.iter().filter(|&&h| h).count() as f64 / reps as f64);
    }
    let config = serde_json::json!({
        "array": array.describe(),
        "n_values": n_values,
        "epsilon": epsilon,
        "reps": reps,
        "seed": seed,
    });
    Ok(ConvergenceReport::new(
        "lln",
        n_values.to_vec(),
        reps,
        Metric::DeviationProbability,
        values,
        &config,
    ))
}

fn draw(array: &ArraySpec, n: u64, rng: &mut RngStream) -> f64 {
    match array {
        ArraySpec::Constant { value } => *value,
        ArraySpec::Exponential { mean } => -mean * rng.uniform().ln(),
        ArraySpec::ClippedPareto => (1.0 / rng.uniform()).min(n as f64),
        ArraySpec::EmbeddedDurations(_) => unreachable!("embedded rows are simulated as walks"),
    }
}

/// Fraction of `taus` further than `epsilon` from `s`.
pub fn deviation_probability(taus: &[f64], s: f64, epsilon: f64) -> f64 {
    if taus.is_empty() {
        return 0.0;
    }
    taus.iter().filter(|&&t| (t - s).abs() > epsilon).count() as f64 / taus.len() as f64
}

/// `P(|tau^N(⌊N s⌋) - s| > epsilon)` for groups of embedded paths sharing
/// one `N` each.
pub fn stopping_time_drift(groups: &[Vec<EmbeddedPath>], s: f64, epsilon: f64) -> Result<ConvergenceReport> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("drift time must be finite and nonnegative, got {s}")));
    }
    let mut n_values = Vec::new();
    let mut values = Vec::new();
    let mut size = 0;
    for group in groups {
        let Some(first) = group.first() else {
            return Err(Error::Domain("empty group of embedded paths".into()));
        };
        let n = first.n;
        let k = (n as f64 * s).floor() as usize;
        let mut taus = Vec::with_capacity(group.len());
        for p in group {
            if p.n != n {
                return Err(Error::Domain("paths in one group must share N".into()));
            }
            let tau = p
                .taus
                .get(k)
                .ok_or_else(|| Error::Domain(format!("path has {} steps, need {k}", p.steps())))?;
            taus.push(*tau);
        }
        n_values.push(n);
        values.push(deviation_probability(&taus, s, epsilon));
        size = size.max(group.len());
    }
    let config = serde_json::json!({ "s": s, "epsilon": epsilon, "N_values": n_values });
    Ok(ConvergenceReport::new(
        "stopping_time_drift",
        n_values,
        size,
        Metric::DeviationProbability,
        values,
        &config,
    ))
}

/// Settings for [`drift_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    #[serde(rename = "N_values")]
    pub n_values: Vec<u64>,
    pub s: f64,
    pub epsilon: f64,
    pub reps: usize,
    pub seed: u64,
    pub grid: TimeGrid,
}

/// Simulates the embedded walks behind [`stopping_time_drift`] one replica at
/// a time, keeping only `tau^N(⌊N s⌋)`.
pub fn drift_study(solver: &ScaleSolver, start: f64, cfg: &DriftConfig) -> Result<ConvergenceReport> {
    if cfg.reps == 0 || !(cfg.s >= 0.0 && cfg.s.is_finite()) {
        return Err(Error::Domain("drift study needs reps > 0 and s >= 0".into()));
    }
    let (qf, mu) = (solver.qf(), solver.mu());
    let bf = BridgeFunction::new(mu.clone());
    let mut values = Vec::with_capacity(cfg.n_values.len());
    for (j, &n) in cfg.n_values.iter().enumerate() {
        let provider = MemoScale::new(solver.clone(), n)?;
        let k = (n as f64 * cfg.s).floor() as usize;
        let taus = (0..cfg.reps)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, j, i);
                simulate_embedded_walk(qf, &bf, &provider, start, k, &mut rng, &cfg.grid).map(|p| p.taus[k])
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(deviation_probability(&taus, cfg.s, cfg.epsilon));
    }
    let config = serde_json::json!({
        "model": qf.spec().name(),
        "start": start,
        "measure": mu.summary(),
        "solver": solver.config(),
        "drift": cfg,
    });
    Ok(ConvergenceReport::new(
        "stopping_time_drift",
        cfg.n_values.clone(),
        cfg.reps,
        Metric::DeviationProbability,
        values,
        &config,
    ))
}

/// Settings for [`marginal_convergence_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalConfig {
    #[serde(rename = "N_values")]
    pub n_values: Vec<u64>,
    pub t: f64,
    pub sample_size: usize,
    pub seed: u64,
}

/// Sorted samples of `Y^N_{⌊N t⌋}` for one `N`.
pub fn walk_marginal_samples(
    solver: &ScaleSolver,
    start: f64,
    n: u64,
    t: f64,
    sample_size: usize,
    seed: u64,
    group: usize,
) -> Result<Vec<f64>> {
    let provider = MemoScale::new(solver.clone(), n)?;
    let mu = solver.mu();
    let steps = (n as f64 * t).floor() as usize;
    let mut out = (0..sample_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, group, i);
            simulate_endpoint(&provider, mu, start, steps, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// KS distance between the walk's marginal at time `t` and `reference` for
/// each `N`.
pub fn marginal_convergence_study(
    solver: &ScaleSolver,
    reference: &ReferenceMarginal,
    cfg: &MarginalConfig,
) -> Result<ConvergenceReport> {
    if cfg.sample_size == 0 || !(cfg.t > 0.0) {
        return Err(Error::Domain("marginal study needs samples and t > 0".into()));
    }
    let (qf, mu) = (solver.qf(), solver.mu());
    let start = qf.spec().start();
    let mut values = Vec::with_capacity(cfg.n_values.len());
    for (j, &n) in cfg.n_values.iter().enumerate() {
        let sample = walk_marginal_samples(solver, start, n, cfg.t, cfg.sample_size, cfg.seed, j)?;
        values.push(ks_statistic(&sample, |x| reference.cdf(x))?);
    }
    let config = serde_json::json!({
        "model": qf.spec().name(),
        "start": start,
        "measure": mu.summary(),
        "solver": solver.config(),
        "reference": reference.provenance,
        "marginal": cfg,
    });
    Ok(ConvergenceReport::new(
        "marginal_convergence",
        cfg.n_values.clone(),
        cfg.sample_size,
        Metric::Ks,
        values,
        &config,
    ))
}

/// Settings for [`coupling_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    #[serde(rename = "N_values")]
    pub n_values: Vec<u64>,
    pub samples: usize,
    /// Number of equally spaced times in `[0, 1]` at which paths are compared.
    pub time_points: usize,
    pub seed: u64,
    pub grid: TimeGrid,
}

/// Median over samples of `sup_t |Y^N_{N t} - M_t|` for a constant
/// coefficient, with `M` rebuilt from the embedding's Brownian paths.
pub fn coupling_study(solver: &ScaleSolver, cfg: &CouplingConfig) -> Result<ConvergenceReport> {
    if cfg.samples == 0 || cfg.time_points == 0 {
        return Err(Error::Domain("coupling study needs samples and time points".into()));
    }
    let (qf, mu) = (solver.qf(), solver.mu());
    let start = qf.spec().start();
    let bf = BridgeFunction::new(mu.clone());
    let times: Vec<f64> = if cfg.time_points == 1 {
        vec![0.0]
    } else {
        (0..cfg.time_points).map(|i| i as f64 / (cfg.time_points - 1) as f64).collect()
    };
    let mut values = Vec::with_capacity(cfg.n_values.len());
    for (j, &n) in cfg.n_values.iter().enumerate() {
        let provider = MemoScale::new(solver.clone(), n)?;
        let mut dists = (0..cfg.samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, j, i);
                let cp = simulate_coupled_walk(qf, &bf, &provider, start, &times, &mut rng, &cfg.grid)?;
                coupled_sup_distance(&cp.path, &cp.times, &cp.diffusion)
            })
            .collect::<Result<Vec<f64>>>()?;
        dists.sort_by(f64::total_cmp);
        values.push(median_sorted(&dists));
    }
    let config = serde_json::json!({
        "model": qf.spec().name(),
        "start": start,
        "measure": mu.summary(),
        "solver": solver.config(),
        "coupling": cfg,
    });
    Ok(ConvergenceReport::new(
        "coupled_sup_distance",
        cfg.n_values.clone(),
        cfg.samples,
        Metric::SupPathDistance,
        values,
        &config,
    ))
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
