//! Smooth unconstrained minimization, gradient verification and analytical-model fitting.

mod am_fit;
mod gradcheck;
mod lbfgs;

pub use am_fit::{
    fit_am, fit_am_multistart, from_unconstrained, to_unconstrained, AmFit, AmFitConfig, AmInit, AmObjective,
    FitError, RestartSummary,
};
pub use gradcheck::{check_gradient, rel_error, GradCheck, COORDINATE_LIMIT};
pub use lbfgs::{
    minimize, minimize_observed, write_trace_csv, Control, FnObjective, IterState, LbfgsConfig, Minimum, Objective,
    ObjectiveError, OptimError, Termination, TraceRow,
};
