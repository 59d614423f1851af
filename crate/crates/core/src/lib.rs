//! Scale factors that embed scaled random walks into driftless diffusions.
//!
//! Given a diffusion `dM = eta(M) dW` on an interval `(l, r)` and an increment
//! law `mu` with mean zero and unit variance, the walk
//! `Y_{k+1} = Y_k + a_N(Y_k) X_{k+1}` uses a state-dependent scale factor
//! chosen so that each step can be realised as the diffusion observed at a
//! stopping time with mean `1/N`. The crate computes the scale factors,
//! simulates the walks, builds the embedding stopping times explicitly, and
//! runs the convergence experiments that check the resulting approximation.

pub mod convergence;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod ext_real;
pub mod measure;
pub mod normal;
pub mod quadrature;
pub mod rng;
pub mod scale;
pub mod walk;

pub use diffusion::{
    classify_boundary, classify_boundary_from, BoundaryProbe, BoundaryReport, Coefficient, DiffusionSpec,
    Interval, Piece, PieceExpr, QFunction, QMethod, Side,
};
pub use error::{Error, Result};
pub use measure::{DensityFamily, IncrementMeasure, MeasureSpec};
pub use rng::{RngStream, Uniforms};
pub use scale::{a_bar, classify_case, g_eval, g_eval_detailed, Case, CaseReport, ScaleEquationResult, ScaleFactorTable, ScaleSolver, Status};
pub use convergence::{
    ks_statistic, lln_experiment, marginal_convergence_study, reference_marginal, stopping_time_drift, ArraySpec,
    ConvergenceReport, Metric, Provenance, ReferenceMarginal, ReferenceMode,
};
pub use embedding::{
    b_eval, b_x_eval, compensate_boundary, coupled_sup_distance, sample_embedded_step, simulate_coupled_walk,
    simulate_embedded_paths, simulate_embedded_walk, BridgeFunction, CoupledPath, EmbeddedPath, EmbeddedStep,
    StepSampler, TimeGrid,
};
pub use walk::{MemoScale, ScaleProvider, StepScale, TableScale, WalkPath};
