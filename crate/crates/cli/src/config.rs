//! Declarative experiment configs (TOML).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use walkdiff_core::diffusion::{Coefficient, Piece};
use walkdiff_core::measure::named_measure;
use walkdiff_core::{DiffusionSpec, Interval, MeasureSpec};

use crate::error::CliError;

/// One experiment: what to run, on which model, with which numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelBlock,
    #[serde(default = "MeasureSpec::rademacher")]
    pub measure: MeasureSpec,
    pub command: Command,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// Catalog name, or `piecewise` together with `pieces`.
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    /// `[l, r]`; TOML accepts `inf` and `-inf`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    /// Start point `m`.
    pub m: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pieces: Vec<Piece>,
}

impl ModelBlock {
    pub fn build(&self) -> Result<DiffusionSpec, CliError> {
        let interval = match self.interval {
            Some([l, r]) => Some(Interval::new(l, r)?),
            None => None,
        };
        let spec = if self.name == "piecewise" {
            if self.pieces.is_empty() {
                return Err(CliError::Validation("model `piecewise` needs at least one entry in `pieces`".into()));
            }
            if !self.params.is_empty() {
                return Err(CliError::Validation("model `piecewise` takes no `params`".into()));
            }
            DiffusionSpec::new(
                "piecewise",
                Coefficient::Piecewise {
                    pieces: self.pieces.clone(),
                },
                interval,
                self.m,
            )?
        } else {
            if !self.pieces.is_empty() {
                return Err(CliError::Validation(format!("model `{}` takes no `pieces`", self.name)));
            }
            DiffusionSpec::from_catalog(&self.name, &self.params, interval, self.m)?
        };
        Ok(spec)
    }
}

/// Output locations, relative to the output directory unless absolute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Raw samples behind a report (marginal studies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_csv: Option<String>,
}

/// Every numerical default in one place; each entry can be overridden in
/// the config's `[tolerances]` table or with `--tol key=value`.
///
/// | key | default | meaning |
/// |---|---|---|
/// | `q_rel_tol` | 1e-9 | relative tolerance of the `q` quadrature |
/// | `g_rel_tol` | 1e-11 | relative tolerance of `G_y(a)` |
/// | `divergence_cap` | 1e12 | values of `G` above this are infinite |
/// | `max_windows` | 1100 | dyadic windows for unbounded tails of `G` |
/// | `solver_rel_tol` | 1e-12 | relative bracket width of the bisection |
/// | `solver_max_iter` | 200 | bisection iterations |
/// | `equality_tol` | 1e-6 | `|G - 1/N| ≤ tol / N` counts as equality |
/// | `grid_nodes` | 2048 | initial intervals of the duration grid |
/// | `v_max` | 24 | duration grid covers `s ≤ 1 - exp(-v_max)` |
/// | `refine_tol` | 0.1 | grid refinement acceptance |
/// | `max_grid_nodes` | 65536 | refinement limit |
/// | `hermite_nodes` | 64 | Gauss–Hermite nodes for densities |
/// | `euler_step` | 1e-4 | Euler oracle step |
/// | `euler_paths` | 40000 | Euler oracle paths |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub q_rel_tol: f64,
    pub g_rel_tol: f64,
    pub divergence_cap: f64,
    pub max_windows: usize,
    pub solver_rel_tol: f64,
    pub solver_max_iter: usize,
    pub equality_tol: f64,
    pub grid_nodes: usize,
    pub v_max: f64,
    pub refine_tol: f64,
    pub max_grid_nodes: usize,
    pub hermite_nodes: usize,
    pub euler_step: f64,
    pub euler_paths: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            q_rel_tol: 1e-9,
            g_rel_tol: 1e-11,
            divergence_cap: 1e12,
            max_windows: 1100,
            solver_rel_tol: 1e-12,
            solver_max_iter: 200,
            equality_tol: 1e-6,
            grid_nodes: 2048,
            v_max: 24.0,
            refine_tol: 0.1,
            max_grid_nodes: 1 << 16,
            hermite_nodes: 64,
            euler_step: 1e-4,
            euler_paths: 40_000,
        }
    }
}

impl Tolerances {
    /// Applies `key=value`.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--tol expects key=value, got `{assignment}`")))?;
        let key = key.trim();
        let value = value.trim();
        let float = || -> Result<f64, CliError> {
            value
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--tol {key}: `{value}` is not a number")))
        };
        let int = || -> Result<usize, CliError> {
            value
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("--tol {key}: `{value}` is not a nonnegative integer")))
        };
        match key {
            "q_rel_tol" => self.q_rel_tol = float()?,
            "g_rel_tol" => self.g_rel_tol = float()?,
            "divergence_cap" => self.divergence_cap = float()?,
            "max_windows" => self.max_windows = int()?,
            "solver_rel_tol" => self.solver_rel_tol = float()?,
            "solver_max_iter" => self.solver_max_iter = int()?,
            "equality_tol" => self.equality_tol = float()?,
            "grid_nodes" => self.grid_nodes = int()?,
            "v_max" => self.v_max = float()?,
            "refine_tol" => self.refine_tol = float()?,
            "max_grid_nodes" => self.max_grid_nodes = int()?,
            "hermite_nodes" => self.hermite_nodes = int()?,
            "euler_step" => self.euler_step = float()?,
            "euler_paths" => self.euler_paths = int()?,
            other => return Err(CliError::Usage(format!("unknown tolerance key `{other}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("q_rel_tol", self.q_rel_tol),
            ("g_rel_tol", self.g_rel_tol),
            ("divergence_cap", self.divergence_cap),
            ("solver_rel_tol", self.solver_rel_tol),
            ("equality_tol", self.equality_tol),
            ("v_max", self.v_max),
            ("refine_tol", self.refine_tol),
            ("euler_step", self.euler_step),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(CliError::Validation(format!("tolerance `{k}` must be positive, got {v}")));
            }
        }
        let counts = [
            ("max_windows", self.max_windows),
            ("solver_max_iter", self.solver_max_iter),
            ("grid_nodes", self.grid_nodes),
            ("hermite_nodes", self.hermite_nodes),
            ("euler_paths", self.euler_paths),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(CliError::Validation(format!("tolerance `{k}` must be positive")));
            }
        }
        if self.grid_nodes < 2 || self.max_grid_nodes < self.grid_nodes {
            return Err(CliError::Validation("need 2 <= grid_nodes <= max_grid_nodes".into()));
        }
        Ok(())
    }
}

/// The command block: exactly one subcommand and its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Classify(ClassifyCmd),
    Qfun(QfunCmd),
    Scalefactor(ScaleFactorCmd),
    Walk(WalkCmd),
    Embed(EmbedCmd),
    Converge(ConvergeCmd),
    Lln(LlnCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Classify(_) => "classify",
            Command::Qfun(_) => "qfun",
            Command::Scalefactor(_) => "scalefactor",
            Command::Walk(_) => "walk",
            Command::Embed(_) => "embed",
            Command::Converge(_) => "converge",
            Command::Lln(_) => "lln",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyCmd {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QfunCmd {
    /// Reference point; defaults to the model's start point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    pub x: Vec<f64>,
    /// `auto` or `quadrature`.
    #[serde(default = "default_method")]
    pub method: String,
}

fn default_method() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleFactorCmd {
    #[serde(rename = "N")]
    pub n: u64,
    /// `min:max:count` or a comma-separated list.
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkCmd {
    #[serde(rename = "N")]
    pub n: u64,
    pub steps: usize,
    #[serde(default = "one")]
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedCmd {
    #[serde(rename = "N")]
    pub n: u64,
    pub steps: usize,
    #[serde(default = "one")]
    pub paths: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergeExperiment {
    /// KS distance of `Y^N_{⌊Nt⌋}` to the law of `M_t`.
    Marginal,
    /// `P(|tau^N(⌊Ns⌋) - s| > epsilon)`.
    Drift,
    /// Median sup distance between the walk and the diffusion it embeds into.
    Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeCmd {
    pub experiment: ConvergeExperiment,
    #[serde(rename = "N_values")]
    pub n_values: Vec<u64>,
    /// Samples (marginal, coupling) or replicas (drift).
    pub samples: usize,
    #[serde(default = "unit")]
    pub t: f64,
    #[serde(default = "unit")]
    pub s: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_time_points")]
    pub time_points: usize,
    /// `exact` or `auto` (Euler oracle when no closed form exists).
    #[serde(default = "default_reference")]
    pub reference: String,
    /// Pass requires the value at the largest `N` to be below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "yes")]
    pub require_trend: bool,
}

fn unit() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    0.05
}

fn default_time_points() -> usize {
    201
}

fn default_reference() -> String {
    "auto".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Constant,
    Exponential,
    ClippedPareto,
    /// `N rho^N(k)` from the embedded walk of the configured model.
    Embedded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlnCmd {
    pub array: ArrayKind,
    pub n_values: Vec<u64>,
    pub epsilon: f64,
    pub reps: usize,
    /// Constant value or exponential mean.
    #[serde(default = "unit")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "yes")]
    pub require_trend: bool,
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Parse(e.to_string()))
}

/// Structural checks beyond the schema: the model and measure build, and
/// command settings are in range.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.model.build()?;
    cfg.measure.build().map_err(|e| CliError::Validation(format!("measure: {e}")))?;
    cfg.tolerances.validate()?;
    match &cfg.command {
        Command::Classify(_) => {}
        Command::Qfun(c) => {
            if c.x.is_empty() {
                return Err(CliError::Validation("qfun needs at least one x".into()));
            }
            if c.method != "auto" && c.method != "quadrature" {
                return Err(CliError::Validation(format!("qfun method `{}` is not auto|quadrature", c.method)));
            }
        }
        Command::Scalefactor(c) => {
            positive_n(c.n)?;
            parse_grid(&c.grid)?;
        }
        Command::Walk(c) => positive_n(c.n)?,
        Command::Embed(c) => positive_n(c.n)?,
        Command::Converge(c) => {
            if c.n_values.is_empty() || c.n_values.contains(&0) {
                return Err(CliError::Validation("N_values must be a nonempty list of positive integers".into()));
            }
            if c.samples == 0 {
                return Err(CliError::Validation("samples must be positive".into()));
            }
            if !(c.t > 0.0 && c.t.is_finite()) || !(c.s >= 0.0 && c.s.is_finite()) || !(c.epsilon > 0.0) {
                return Err(CliError::Validation("need t > 0, s >= 0 and epsilon > 0".into()));
            }
            if c.reference != "auto" && c.reference != "exact" {
                return Err(CliError::Validation(format!("reference `{}` is not auto|exact", c.reference)));
            }
        }
        Command::Lln(c) => {
            if c.n_values.is_empty() || c.n_values.contains(&0) || c.reps == 0 || !(c.epsilon > 0.0) {
                return Err(CliError::Validation(
                    "lln needs positive n_values, reps > 0 and epsilon > 0".into(),
                ));
            }
        }
    }
    Ok(())
}

fn positive_n(n: u64) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation("N must be positive".into()));
    }
    Ok(())
}

/// `min:max:count` or `y1,y2,...`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Validation(format!("grid `{text}` is neither min:max:count nor a comma-separated list"));
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let min: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let max: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        walkdiff_core::scale::linear_grid(min, max, count)
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|y| !y.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

/// `name` or `name{key=value,...}` as used by `--model` and `--mu`.
pub fn parse_named(text: &str) -> Result<(String, BTreeMap<String, f64>), CliError> {
    let text = text.trim();
    let bad = || CliError::Usage(format!("cannot parse `{text}`; expected name or name{{key=value,...}}"));
    let (name, rest) = match text.find('{') {
        Some(i) => (&text[..i], Some(&text[i + 1..])),
        None => (text, None),
    };
    let mut params = BTreeMap::new();
    if let Some(rest) = rest {
        let inner = rest.strip_suffix('}').ok_or_else(bad)?;
        for item in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(bad)?;
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            params.insert(k.trim().to_string(), v);
        }
    }
    if name.is_empty() {
        return Err(bad());
    }
    Ok((name.to_string(), params))
}

/// Measure spec from `--mu` syntax.
pub fn measure_from_flag(text: &str) -> Result<MeasureSpec, CliError> {
    let (name, params) = parse_named(text)?;
    Ok(named_measure(&name, &params)?)
}
