//! Command-line front end: configs in, CSV and JSON artifacts out.
//!
//! Every subcommand can run from flags alone or from a TOML config given with
//! `--config`; flags given alongside a config override its values. A run
//! prints exactly one line of JSON on standard output, on success and on
//! failure alike.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::{run_command, RunContext};
use crate::config::{
    measure_from_flag, parse_config, parse_named, validate, ArrayKind, ClassifyCmd, Command, ConvergeCmd,
    ConvergeExperiment, EmbedCmd, ExperimentConfig, LlnCmd, ModelBlock, QfunCmd, ScaleFactorCmd, WalkCmd,
};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "walkdiff", version, about = "Scaled random walks embedded into driftless diffusions")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; a random one is generated and reported when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = "WALKDIFF_THREADS")]
    pub threads: Option<usize>,
    /// Directory for relative output paths.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Tolerance override `key=value`; repeatable.
    #[arg(long = "tol", global = true)]
    pub tol: Vec<String>,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Model as `name` or `name{key=value,...}`, e.g. `cev{alpha=0.5}`.
    #[arg(long)]
    pub model: Option<String>,
    /// Start point.
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    /// State interval `l,r`; accepts `inf` and `-inf`.
    #[arg(long, allow_hyphen_values = true)]
    pub interval: Option<String>,
    /// Increment law: rademacher, uniform{half_width=..}, normal, exp_rational.
    #[arg(long)]
    pub mu: Option<String>,
    /// Output file.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Which construction applies, with the status of each assumption.
    Classify {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate q(y, x) and its x-derivative.
    Qfun {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        y: Option<f64>,
        /// Comma-separated evaluation points.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
        /// `auto` or `quadrature`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Tabulate the scale factor a_N(y) on a grid.
    Scalefactor {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N")]
        n: Option<u64>,
        /// `min:max:count` or a comma-separated list.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Simulate scaled random walks.
    Walk {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N")]
        n: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Simulate walks together with their embedding stopping times.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "N")]
        n: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        /// Initial intervals of the duration grid.
        #[arg(long)]
        grid_nodes: Option<usize>,
    },
    /// Convergence study over a list of N.
    Converge {
        #[command(flatten)]
        model: ModelArgs,
        /// marginal, drift or coupling.
        #[arg(long)]
        experiment: Option<String>,
        /// Comma-separated list.
        #[arg(long = "N-values")]
        n_values: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        time_points: Option<usize>,
        /// `exact` or `auto`.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        require_trend: Option<bool>,
        /// CSV of the raw marginal samples.
        #[arg(long)]
        samples_csv: Option<String>,
    },
    /// Weak law of large numbers for a triangular array.
    Lln {
        #[command(flatten)]
        model: ModelArgs,
        /// constant, exponential, clipped_pareto or embedded.
        #[arg(long)]
        array: Option<String>,
        /// Comma-separated list.
        #[arg(long = "n-values")]
        n_values: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        value: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        require_trend: Option<bool>,
    },
}

impl Sub {
    fn name(&self) -> &'static str {
        match self {
            Sub::Classify { .. } => "classify",
            Sub::Qfun { .. } => "qfun",
            Sub::Scalefactor { .. } => "scalefactor",
            Sub::Walk { .. } => "walk",
            Sub::Embed { .. } => "embed",
            Sub::Converge { .. } => "converge",
            Sub::Lln { .. } => "lln",
        }
    }

    fn model_args(&self) -> &ModelArgs {
        match self {
            Sub::Classify { model }
            | Sub::Qfun { model, .. }
            | Sub::Scalefactor { model, .. }
            | Sub::Walk { model, .. }
            | Sub::Embed { model, .. }
            | Sub::Converge { model, .. }
            | Sub::Lln { model, .. } => model,
        }
    }
}

fn missing(cmd: &str, flag: &str) -> CliError {
    CliError::Usage(format!("{cmd} needs --{flag} (or a config providing it)"))
}

fn list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("--{flag}: cannot parse `{}`", s.trim())))
        })
        .collect()
}

fn parse_interval(text: &str) -> Result<[f64; 2], CliError> {
    let v: Vec<f64> = list(text, "interval")?;
    match v.as_slice() {
        [l, r] => Ok([*l, *r]),
        _ => Err(CliError::Usage(format!("--interval expects `l,r`, got `{text}`"))),
    }
}

fn merge_model(base: Option<ModelBlock>, args: &ModelArgs) -> Result<ModelBlock, CliError> {
    let (name, params) = match (&args.model, &base) {
        (Some(text), _) => parse_named(text)?,
        (None, Some(b)) => (b.name.clone(), b.params.clone()),
        (None, None) => return Err(CliError::Usage("no model given; use --model or --config".into())),
    };
    // A --model naming a different model discards the config's model block.
    let base = base.filter(|b| args.model.is_none() || b.name == name);
    let interval = match &args.interval {
        Some(t) => Some(parse_interval(t)?),
        None => base.as_ref().and_then(|b| b.interval),
    };
    let m = match (args.m, &base) {
        (Some(m), _) => m,
        (None, Some(b)) => b.m,
        (None, None) => default_start(&name),
    };
    Ok(ModelBlock {
        name,
        params,
        interval,
        m,
        pieces: base.map(|b| b.pieces).unwrap_or_default(),
    })
}

/// Start point used when neither flags nor config give one: a point well
/// inside the model's natural state space.
fn default_start(name: &str) -> f64 {
    match name {
        "gbm" | "cev" | "absorbed_bm" | "log_example" => 1.0,
        _ => 0.0,
    }
}

fn merge_command(base: Option<Command>, sub: &Sub) -> Result<(Command, Option<String>), CliError> {
    let cmd = match sub {
        Sub::Classify { .. } => Command::Classify(ClassifyCmd::default()),
        Sub::Qfun { y, x, method, .. } => {
            let b = match base {
                Some(Command::Qfun(b)) => Some(b),
                _ => None,
            };
            let x = match (x, &b) {
                (Some(t), _) => list(t, "x")?,
                (None, Some(b)) => b.x.clone(),
                (None, None) => return Err(missing("qfun", "x")),
            };
            Command::Qfun(QfunCmd {
                y: y.or(b.as_ref().and_then(|b| b.y)),
                x,
                method: method
                    .clone()
                    .or(b.map(|b| b.method))
                    .unwrap_or_else(|| "auto".into()),
            })
        }
        Sub::Scalefactor { n, grid, .. } => {
            let b = match base {
                Some(Command::Scalefactor(b)) => Some(b),
                _ => None,
            };
            Command::Scalefactor(ScaleFactorCmd {
                n: n.or(b.as_ref().map(|b| b.n)).ok_or_else(|| missing("scalefactor", "N"))?,
                grid: grid
                    .clone()
                    .or(b.map(|b| b.grid))
                    .ok_or_else(|| missing("scalefactor", "grid"))?,
            })
        }
        Sub::Walk { n, steps, paths, .. } => {
            let b = match base {
                Some(Command::Walk(b)) => Some(b),
                _ => None,
            };
            Command::Walk(WalkCmd {
                n: n.or(b.as_ref().map(|b| b.n)).ok_or_else(|| missing("walk", "N"))?,
                steps: steps
                    .or(b.as_ref().map(|b| b.steps))
                    .ok_or_else(|| missing("walk", "steps"))?,
                paths: paths.or(b.map(|b| b.paths)).unwrap_or(1),
            })
        }
        Sub::Embed { n, steps, paths, .. } => {
            let b = match base {
                Some(Command::Embed(b)) => Some(b),
                _ => None,
            };
            Command::Embed(EmbedCmd {
                n: n.or(b.as_ref().map(|b| b.n)).ok_or_else(|| missing("embed", "N"))?,
                steps: steps
                    .or(b.as_ref().map(|b| b.steps))
                    .ok_or_else(|| missing("embed", "steps"))?,
                paths: paths.or(b.map(|b| b.paths)).unwrap_or(1),
            })
        }
        Sub::Converge {
            experiment,
            n_values,
            samples,
            t,
            s,
            epsilon,
            time_points,
            reference,
            threshold,
            require_trend,
            samples_csv,
            ..
        } => {
            let b = match base {
                Some(Command::Converge(b)) => Some(b),
                _ => None,
            };
            let experiment = match (experiment, &b) {
                (Some(e), _) => match e.as_str() {
                    "marginal" => ConvergeExperiment::Marginal,
                    "drift" => ConvergeExperiment::Drift,
                    "coupling" => ConvergeExperiment::Coupling,
                    other => {
                        return Err(CliError::Usage(format!(
                            "--experiment `{other}` is not marginal|drift|coupling"
                        )))
                    }
                },
                (None, Some(b)) => b.experiment,
                (None, None) => return Err(missing("converge", "experiment")),
            };
            let n_values = match (n_values, &b) {
                (Some(t), _) => list(t, "N-values")?,
                (None, Some(b)) => b.n_values.clone(),
                (None, None) => return Err(missing("converge", "N-values")),
            };
            let cmd = ConvergeCmd {
                experiment,
                n_values,
                samples: samples
                    .or(b.as_ref().map(|b| b.samples))
                    .ok_or_else(|| missing("converge", "samples"))?,
                t: t.or(b.as_ref().map(|b| b.t)).unwrap_or(1.0),
                s: s.or(b.as_ref().map(|b| b.s)).unwrap_or(1.0),
                epsilon: epsilon.or(b.as_ref().map(|b| b.epsilon)).unwrap_or(0.05),
                time_points: time_points.or(b.as_ref().map(|b| b.time_points)).unwrap_or(201),
                reference: reference
                    .clone()
                    .or(b.as_ref().map(|b| b.reference.clone()))
                    .unwrap_or_else(|| "auto".into()),
                threshold: threshold.or(b.as_ref().and_then(|b| b.threshold)),
                require_trend: require_trend.or(b.as_ref().map(|b| b.require_trend)).unwrap_or(true),
            };
            return Ok((Command::Converge(cmd), samples_csv.clone()));
        }
        Sub::Lln {
            array,
            n_values,
            epsilon,
            reps,
            value,
            threshold,
            require_trend,
            ..
        } => {
            let b = match base {
                Some(Command::Lln(b)) => Some(b),
                _ => None,
            };
            let array = match (array, &b) {
                (Some(a), _) => match a.as_str() {
                    "constant" => ArrayKind::Constant,
                    "exponential" => ArrayKind::Exponential,
                    "clipped_pareto" => ArrayKind::ClippedPareto,
                    "embedded" => ArrayKind::Embedded,
                    other => {
                        return Err(CliError::Usage(format!(
                            "--array `{other}` is not constant|exponential|clipped_pareto|embedded"
                        )))
                    }
                },
                (None, Some(b)) => b.array,
                (None, None) => return Err(missing("lln", "array")),
            };
            let n_values = match (n_values, &b) {
                (Some(t), _) => list(t, "n-values")?,
                (None, Some(b)) => b.n_values.clone(),
                (None, None) => return Err(missing("lln", "n-values")),
            };
            Command::Lln(LlnCmd {
                array,
                n_values,
                epsilon: epsilon
                    .or(b.as_ref().map(|b| b.epsilon))
                    .ok_or_else(|| missing("lln", "epsilon"))?,
                reps: reps.or(b.as_ref().map(|b| b.reps)).ok_or_else(|| missing("lln", "reps"))?,
                value: value.or(b.as_ref().map(|b| b.value)).unwrap_or(1.0),
                threshold: threshold.or(b.as_ref().and_then(|b| b.threshold)),
                require_trend: require_trend.or(b.as_ref().map(|b| b.require_trend)).unwrap_or(true),
            })
        }
    };
    Ok((cmd, None))
}

/// Combines the optional config file with the command-line flags into one
/// validated config.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
            let cfg = parse_config(&text)?;
            if cfg.command.name() != cli.command.name() {
                return Err(CliError::Usage(format!(
                    "config describes `{}` but the subcommand is `{}`",
                    cfg.command.name(),
                    cli.command.name()
                )));
            }
            Some(cfg)
        }
        None => None,
    };
    let args = cli.command.model_args();
    let model = merge_model(base.as_ref().map(|b| b.model.clone()), args)?;
    let measure = match (&args.mu, &base) {
        (Some(t), _) => measure_from_flag(t)?,
        (None, Some(b)) => b.measure.clone(),
        (None, None) => walkdiff_core::MeasureSpec::rademacher(),
    };
    let (command, samples_csv) = merge_command(base.as_ref().map(|b| b.command.clone()), &cli.command)?;
    let mut tolerances = base.as_ref().map(|b| b.tolerances.clone()).unwrap_or_default();
    if let Sub::Embed {
        grid_nodes: Some(g), ..
    } = &cli.command
    {
        tolerances.grid_nodes = *g;
        tolerances.max_grid_nodes = tolerances.max_grid_nodes.max(*g);
    }
    for t in &cli.tol {
        tolerances.set(t)?;
    }
    let mut output = base.as_ref().map(|b| b.output.clone()).unwrap_or_default();
    if let Some(p) = &args.out {
        output.path = Some(p.clone());
    }
    if samples_csv.is_some() {
        output.samples_csv = samples_csv;
    }
    let cfg = ExperimentConfig {
        seed: cli.seed.or(base.as_ref().and_then(|b| b.seed)),
        model,
        measure,
        command,
        output,
        tolerances,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn fresh_seed() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0),
    );
    h.finish()
}

fn execute(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve_config(cli)?;
    let generated = cfg.seed.is_none();
    let seed = cfg.seed.unwrap_or_else(fresh_seed);
    let ctx = RunContext {
        out_dir: cli.out_dir.clone(),
        seed,
    };
    let mut summary = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?
            .install(|| run_command(&cfg, &ctx))?,
        None => run_command(&cfg, &ctx)?,
    };
    summary
        .as_object_mut()
        .expect("summaries are objects")
        .insert("seed_generated".into(), json!(generated));
    Ok(summary)
}

/// Parses `args`, runs, prints the JSON summary line and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            println!("{}", json!({ "status": "error", "code": "usage_error", "message": e.kind().to_string() }));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("walkdiff: {e}");
            println!(
                "{}",
                json!({ "status": "error", "command": cli.command.name(), "code": e.code(), "message": e.to_string() })
            );
            e.exit_code()
        }
    }
}
