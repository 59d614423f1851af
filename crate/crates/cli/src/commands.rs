//! Execution of a validated config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use walkdiff_core::convergence::{
    drift_study, coupling_study, lln_experiment, marginal_convergence_study, reference_marginal,
    walk_marginal_samples, ArraySpec, ConvergenceReport, CouplingConfig, DriftConfig, EmbeddedArray, EulerConfig,
    MarginalConfig, Metric, ReferenceMode,
};
use walkdiff_core::embedding::{simulate_embedded_paths, BridgeFunction, TimeGrid};
use walkdiff_core::scale::{classify_case, GConfig, SolverConfig};
use walkdiff_core::walk::{simulate_paths, MemoScale};
use walkdiff_core::{IncrementMeasure, QFunction, QMethod, ScaleSolver};

use crate::config::{parse_grid, ArrayKind, Command, ConvergeExperiment, ExperimentConfig, Tolerances};
use crate::error::CliError;
use crate::output::{num, resolve, write_atomic};

/// Where and with which seed a config runs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// Runs the config's command, writes its artifacts and returns the summary
/// printed on standard output.
pub fn run_command(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let env = Env::build(cfg)?;
    let mut summary = match &cfg.command {
        Command::Classify(_) => classify(&env, cfg, ctx)?,
        Command::Qfun(_) => qfun(&env, cfg, ctx)?,
        Command::Scalefactor(_) => scalefactor(&env, cfg, ctx)?,
        Command::Walk(_) => walk(&env, cfg, ctx)?,
        Command::Embed(_) => embed(&env, cfg, ctx)?,
        Command::Converge(_) => converge(&env, cfg, ctx)?,
        Command::Lln(_) => lln(&env, cfg, ctx)?,
    };
    let obj = summary.as_object_mut().expect("summaries are objects");
    obj.insert("status".into(), json!("ok"));
    obj.insert("command".into(), json!(cfg.command.name()));
    obj.insert("seed".into(), json!(ctx.seed));
    Ok(summary)
}

/// Core objects built from the config.
struct Env {
    qf: QFunction,
    mu: IncrementMeasure,
    solver_cfg: SolverConfig,
    grid: TimeGrid,
    tol: Tolerances,
}

impl Env {
    fn build(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let tol = cfg.tolerances.clone();
        let qf = QFunction::new(cfg.model.build()?).with_tol(tol.q_rel_tol);
        let mu = cfg
            .measure
            .build()
            .map_err(|e| CliError::Validation(format!("measure: {e}")))?;
        let solver_cfg = SolverConfig {
            rel_tol: tol.solver_rel_tol,
            max_iter: tol.solver_max_iter,
            equality_tol: tol.equality_tol,
            g: GConfig {
                divergence_cap: tol.divergence_cap,
                rel_tol: tol.g_rel_tol,
                max_windows: tol.max_windows,
            },
        };
        let grid = TimeGrid {
            nodes: tol.grid_nodes,
            v_max: tol.v_max,
            refine_tol: tol.refine_tol,
            max_nodes: tol.max_grid_nodes,
        };
        Ok(Self {
            qf,
            mu,
            solver_cfg,
            grid,
            tol,
        })
    }

    fn solver(&self) -> Result<ScaleSolver, CliError> {
        Ok(ScaleSolver::with_config(self.qf.clone(), self.mu.clone(), self.solver_cfg)?)
    }

    fn bridge(&self) -> BridgeFunction {
        BridgeFunction::with_nodes(self.mu.clone(), self.tol.hermite_nodes)
    }
}

fn out_path(cfg: &ExperimentConfig, ctx: &RunContext, default: Option<&str>) -> Option<PathBuf> {
    cfg.output
        .path
        .as_deref()
        .or(default)
        .map(|p| resolve(&ctx.out_dir, p))
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

/// Finite numbers as JSON numbers, others as `"inf"`, `"-inf"`, `"nan"`.
fn jnum(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(num(x))
    }
}

fn classify(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let report = classify_case(&env.qf, &env.mu);
    let value = serde_json::to_value(&report).expect("reports serialise");
    let mut outputs = Vec::new();
    if let Some(path) = out_path(cfg, ctx, None) {
        let text = serde_json::to_string_pretty(&value).expect("JSON values serialise") + "\n";
        write_atomic(&path, text.as_bytes())?;
        outputs.push(shown(&path));
    }
    Ok(json!({
        "case_id": report.case_id,
        "assumption_status": report.assumption_status,
        "n0_estimate": report.n0_estimate,
        "notes": report.notes,
        "outputs": outputs,
    }))
}

fn qfun(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Qfun(c) = &cfg.command else { unreachable!() };
    let method = if c.method == "quadrature" { QMethod::Quadrature } else { QMethod::Auto };
    let qf = env.qf.clone().with_method(method);
    let y = c.y.unwrap_or(qf.spec().start());
    let iv = qf.interval();
    let mut csv = String::from("y,x,q,q_x\n");
    let mut rows = Vec::new();
    for &x in &c.x {
        let q = qf.q_eval(y, x)?;
        let qx = if iv.contains_open(x) { qf.q_x_eval(y, x)? } else { f64::NAN };
        writeln!(csv, "{},{},{},{}", num(y), num(x), num(q), num(qx)).unwrap();
        rows.push(json!({ "x": jnum(x), "q": jnum(q), "q_x": jnum(qx) }));
    }
    let mut outputs = Vec::new();
    if let Some(path) = out_path(cfg, ctx, None) {
        write_atomic(&path, csv.as_bytes())?;
        outputs.push(shown(&path));
    }
    Ok(json!({ "y": y, "values": rows, "outputs": outputs }))
}

fn scalefactor(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Scalefactor(c) = &cfg.command else { unreachable!() };
    let grid = parse_grid(&c.grid)?;
    let table = env.solver()?.build_table(c.n, &grid)?;
    let mut csv = String::from("y,a_N,G,exact_equality\n");
    for i in 0..table.grid.len() {
        writeln!(
            csv,
            "{},{},{},{}",
            num(table.grid[i]),
            num(table.values[i]),
            num(table.achieved_g[i]),
            table.exact_equality[i]
        )
        .unwrap();
    }
    let path = out_path(cfg, ctx, Some("table.csv")).expect("default path");
    write_atomic(&path, csv.as_bytes())?;
    Ok(json!({ "N": c.n, "rows": table.grid.len(), "outputs": [shown(&path)] }))
}

fn walk(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Walk(c) = &cfg.command else { unreachable!() };
    let provider = MemoScale::new(env.solver()?, c.n)?;
    let start = env.qf.spec().start();
    let paths = simulate_paths(&provider, &env.mu, start, c.steps, c.paths, ctx.seed)?;
    let mut csv = String::from("path_id,k,y\n");
    for (i, p) in paths.iter().enumerate() {
        for (k, y) in p.states.iter().enumerate() {
            writeln!(csv, "{i},{k},{}", num(*y)).unwrap();
        }
    }
    let path = out_path(cfg, ctx, Some("paths.csv")).expect("default path");
    write_atomic(&path, csv.as_bytes())?;
    let absorbed = paths.iter().filter(|p| p.absorbed_at.is_some()).count();
    Ok(json!({
        "N": c.n,
        "paths": c.paths,
        "steps": c.steps,
        "absorbed_paths": absorbed,
        "outputs": [shown(&path)],
    }))
}

fn embed(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Embed(c) = &cfg.command else { unreachable!() };
    let provider = MemoScale::new(env.solver()?, c.n)?;
    let start = env.qf.spec().start();
    let bf = env.bridge();
    let paths = simulate_embedded_paths(&env.qf, &bf, &provider, start, c.steps, c.paths, ctx.seed, &env.grid)?;
    let mut csv = String::from("path_id,k,tau,state,xi,wait\n");
    let mut total = 0.0;
    for (i, p) in paths.iter().enumerate() {
        writeln!(csv, "{i},0,0.0,{},0.0,0.0", num(p.states[0])).unwrap();
        for (k, st) in p.per_step.iter().enumerate() {
            writeln!(
                csv,
                "{i},{},{},{},{},{}",
                k + 1,
                num(p.taus[k + 1]),
                num(st.endpoint),
                num(st.duration_xi),
                num(st.compensation_wait)
            )
            .unwrap();
        }
        total += p.taus.last().copied().unwrap_or(0.0);
    }
    let path = out_path(cfg, ctx, Some("embedded.csv")).expect("default path");
    write_atomic(&path, csv.as_bytes())?;
    Ok(json!({
        "N": c.n,
        "paths": c.paths,
        "steps": c.steps,
        "mean_final_tau": if c.paths > 0 { jnum(total / c.paths as f64) } else { Value::Null },
        "outputs": [shown(&path)],
    }))
}

/// Config as embedded in reports: everything that determines the numbers.
fn report_config(cfg: &ExperimentConfig, seed: u64) -> Value {
    let mut v = serde_json::to_value(cfg).expect("configs serialise");
    let obj = v.as_object_mut().expect("config is a table");
    obj.remove("output");
    obj.insert("seed".into(), json!(seed));
    v
}

fn report_json(report: &ConvergenceReport, cfg: &ExperimentConfig, seed: u64, pass: bool) -> Value {
    let values: Vec<Value> = report
        .n_values
        .iter()
        .zip(&report.values)
        .map(|(n, v)| json!({ "N": n, "value": jnum(*v) }))
        .collect();
    json!({
        "experiment_id": report.experiment_id,
        "config": report_config(cfg, seed),
        "metric": report.metric,
        "values": values,
        "pass": pass,
        "monotone_trend": report.monotone_trend,
        "sample_size": report.sample_size,
        "config_hash": report.config_hash,
    })
}

fn judge(report: &ConvergenceReport, require_trend: bool, threshold: Option<f64>) -> bool {
    let trend_ok = !require_trend || report.monotone_trend;
    let level_ok = match (threshold, report.last()) {
        (Some(t), Some(v)) => {
            if report.metric == Metric::DeviationProbability {
                v <= t
            } else {
                v < t
            }
        }
        _ => true,
    };
    trend_ok && level_ok
}

fn write_report(
    report: &ConvergenceReport,
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    pass: bool,
) -> Result<(Value, PathBuf), CliError> {
    let value = report_json(report, cfg, ctx.seed, pass);
    let path = out_path(cfg, ctx, Some("report.json")).expect("default path");
    let text = serde_json::to_string_pretty(&value).expect("JSON values serialise") + "\n";
    write_atomic(&path, text.as_bytes())?;
    Ok((value, path))
}

fn converge(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Converge(c) = &cfg.command else { unreachable!() };
    let solver = env.solver()?;
    let start = env.qf.spec().start();
    let mut outputs = Vec::new();
    let report = match c.experiment {
        ConvergeExperiment::Marginal => {
            let mode = if c.reference == "exact" { ReferenceMode::Exact } else { ReferenceMode::Auto };
            let euler = EulerConfig {
                step: env.tol.euler_step,
                paths: env.tol.euler_paths,
                seed: ctx.seed ^ 0x9e37_79b9_7f4a_7c15,
            };
            let reference = reference_marginal(env.qf.spec(), c.t, mode, &euler)?;
            let mcfg = MarginalConfig {
                n_values: c.n_values.clone(),
                t: c.t,
                sample_size: c.samples,
                seed: ctx.seed,
            };
            let report = marginal_convergence_study(&solver, &reference, &mcfg)?;
            if let Some(p) = &cfg.output.samples_csv {
                let mut csv = String::from("N,sample_id,y\n");
                for (j, &n) in c.n_values.iter().enumerate() {
                    let s = walk_marginal_samples(&solver, start, n, c.t, c.samples, ctx.seed, j)?;
                    for (i, y) in s.iter().enumerate() {
                        writeln!(csv, "{n},{i},{}", num(*y)).unwrap();
                    }
                }
                let path = resolve(&ctx.out_dir, p);
                write_atomic(&path, csv.as_bytes())?;
                outputs.push(shown(&path));
            }
            report
        }
        ConvergeExperiment::Drift => {
            let dcfg = DriftConfig {
                n_values: c.n_values.clone(),
                s: c.s,
                epsilon: c.epsilon,
                reps: c.samples,
                seed: ctx.seed,
                grid: env.grid,
            };
            drift_study(&solver, start, &dcfg)?
        }
        ConvergeExperiment::Coupling => {
            let ccfg = CouplingConfig {
                n_values: c.n_values.clone(),
                samples: c.samples,
                time_points: c.time_points,
                seed: ctx.seed,
                grid: env.grid,
            };
            coupling_study(&solver, &ccfg)?
        }
    };
    let pass = judge(&report, c.require_trend, c.threshold);
    let (_, path) = write_report(&report, cfg, ctx, pass)?;
    outputs.insert(0, shown(&path));
    Ok(json!({
        "experiment_id": report.experiment_id,
        "values": report.values.iter().map(|v| jnum(*v)).collect::<Vec<_>>(),
        "pass": pass,
        "outputs": outputs,
    }))
}

fn lln(env: &Env, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Value, CliError> {
    let Command::Lln(c) = &cfg.command else { unreachable!() };
    let array = match c.array {
        ArrayKind::Constant => ArraySpec::Constant { value: c.value },
        ArrayKind::Exponential => ArraySpec::Exponential { mean: c.value },
        ArrayKind::ClippedPareto => ArraySpec::ClippedPareto,
        ArrayKind::Embedded => ArraySpec::EmbeddedDurations(EmbeddedArray {
            solver: env.solver()?,
            grid: env.grid,
            start: env.qf.spec().start(),
        }),
    };
    let report = lln_experiment(&array, &c.n_values, c.epsilon, c.reps, ctx.seed)?;
    let pass = judge(&report, c.require_trend, c.threshold);
    let (_, path) = write_report(&report, cfg, ctx, pass)?;
    Ok(json!({
        "experiment_id": report.experiment_id,
        "values": report.values.iter().map(|v| jnum(*v)).collect::<Vec<_>>(),
        "pass": pass,
        "outputs": [shown(&path)],
    }))
}
