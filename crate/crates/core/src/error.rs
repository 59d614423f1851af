use thiserror::Error;

use crate::diffusion::Side;

/// Errors raised by the numerical core.
///
/// Every variant carries a stable machine-readable code (see [`Error::code`])
/// so that front ends can map failures without matching on message text.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge on [{lo}, {hi}] (estimate {estimate:e}, error {error:e})")]
    QuadratureDivergence {
        lo: f64,
        hi: f64,
        estimate: f64,
        error: f64,
    },

    #[error("boundary classification inconclusive on the {side} side after {probes} probes")]
    Inconclusive { side: Side, probes: usize },

    #[error("unsupported case: {0}")]
    UnsupportedCase(String),

    #[error("no scale factor at y = {y} for N = {n}: G_y(a_bar) = {g_bar:e} < 1/N{}", n0_hint(*.n0_estimate))]
    NoSolution {
        y: f64,
        n: u64,
        g_bar: f64,
        n0_estimate: Option<u64>,
    },

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("time grid refinement did not stabilise after {nodes} nodes")]
    GridUnderflow { nodes: usize },

    #[error("sample is not sorted in nondecreasing order (index {0})")]
    UnsortedInput(usize),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid diffusion specification: {0}")]
    InvalidSpec(String),
}

fn n0_hint(n0: Option<u64>) -> String {
    match n0 {
        Some(n0) => format!(" (estimated N0 = {n0})"),
        None => String::new(),
    }
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::Domain(_) => "domain_error",
            Error::QuadratureDivergence { .. } => "quadrature_divergence",
            Error::Inconclusive { .. } => "inconclusive",
            Error::UnsupportedCase(_) => "unsupported_case",
            Error::NoSolution { .. } => "no_solution",
            Error::InvalidCase(_) => "invalid_case",
            Error::GridUnderflow { .. } => "grid_underflow",
            Error::UnsortedInput(_) => "unsorted_input",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::InvalidMeasure(_) => "invalid_measure",
            Error::InvalidSpec(_) => "invalid_spec",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
