//! Grid solver for infinite-horizon two-player zero-sum differential games
//! with continuous and impulse controls.
//!
//! A game is a [`ProblemSpec`]; its lower and upper values are computed on
//! a [`Grid`] as fixed points of a discrete quasi-variational inequality
//! ([`solve`]), from which feedback policies can be read off and simulated
//! ([`policy`]). The [`oracle`] module holds independent reference solvers.

pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod operators;
pub mod oracle;
pub mod policy;
pub mod problem;
pub mod solver;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{Grid, ValueField};
pub use operators::{hjbi_residual, intervene, qvi_update, sl_value, HamiltonianKind, Nesting, QviForm, StepParams};
pub use oracle::{gauss_seidel_solve, tree_value, ValueInterval};
pub use policy::{extract_policy, simulate, PolicyField, TrajectoryRecord};
pub use problem::{make_builtin, validate_problem, ControlPair, Params, Player, PointSet, ProblemSpec};
pub use solver::{check_lemma1, isaacs_gap, solve, Init, SolveReport, SolverParams};
