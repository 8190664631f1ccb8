//! Fixed-point iteration of the discrete QVI map and the structural
//! diagnostics computed from its solutions.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, ValueField};
use crate::operators::{PointEval, QviForm, StepParams};
use crate::problem::{Player, ProblemSpec};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Constant(f64),
    Field(ValueField),
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    pub step: StepParams,
    pub tol_fix: f64,
    pub max_iters: usize,
    pub init: Init,
    /// Worker threads for the sweep; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SolverParams {
    pub fn new(step: StepParams, tol_fix: f64, max_iters: usize) -> Result<Self> {
        if !(tol_fix > 0.0) || !tol_fix.is_finite() {
            return Err(Error::InvalidParam { name: "tol_fix".into(), reason: format!("must be > 0, got {tol_fix}") });
        }
        if max_iters == 0 {
            return Err(Error::InvalidParam { name: "max_iters".into(), reason: "must be >= 1".into() });
        }
        Ok(Self { step, tol_fix, max_iters, init: Init::Zeros, threads: None })
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads.max(1));
        self
    }

}

/// Recent sweeps used to estimate the contraction rate.
const RATIO_WINDOW: usize = 3;

/// Stopping test on the delta history: the last delta is at most `tol` and
/// the a-posteriori bound `delta rho / (1 - rho)` on the distance to the
/// fixed point is at most `tol`, where `rho` is the larger of `beta` and the
/// recent delta ratios. Impulse branches do not discount, so the observed
/// rate can sit above `beta`.
pub fn should_stop(history: &[f64], beta: f64, tol: f64) -> bool {
    let Some(&last) = history.last() else { return false };
    if last == 0.0 {
        return true;
    }
    if last > tol {
        return false;
    }
    let start = history.len().saturating_sub(RATIO_WINDOW + 1);
    let rho = history[start..].windows(2).map(|w| w[1] / w[0]).fold(beta, f64::max);
    rho < 1.0 && last * rho / (1.0 - rho) <= tol
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub field: ValueField,
    pub form: QviForm,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Seconds.
    pub wall_time: f64,
    pub h: f64,
    pub tol_fix: f64,
}

impl SolveReport {
    pub fn final_delta(&self) -> f64 {
        *self.residual_history.last().expect("history is never empty")
    }

    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged { iterations: self.iterations, last_delta: self.final_delta() })
        }
    }
}

/// `10 (|f|_inf / lambda + max impulse cost)`.
pub fn divergence_threshold(problem: &ProblemSpec, grid: &Grid) -> f64 {
    10.0 * (problem.gain_sup(grid) / problem.discount() + problem.max_impulse_cost(grid))
}

/// One Jacobi sweep: every node updated from the same input field.
/// Runs on the current rayon pool; the result does not depend on it.
pub fn sweep(problem: &ProblemSpec, field: &ValueField, form: QviForm, step: &StepParams) -> Result<ValueField> {
    let grid = field.grid().clone();
    if grid.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: grid.dim() });
    }
    let dim = grid.dim();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .with_min_len(16)
        .map_init(
            || (PointEval::new(field, problem, step), vec![0.0; dim]),
            |(eval, x), i| {
                grid.node_into(i, x);
                eval.update(x, form)
            },
        )
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("update at node {i}")));
    }
    Ok(ValueField::from_parts(grid, values, Some(form)))
}

pub(crate) fn initial_field(init: &Init, grid: &Arc<Grid>) -> Result<ValueField> {
    match init {
        Init::Zeros => ValueField::constant(grid.clone(), 0.0),
        Init::Constant(k) => ValueField::constant(grid.clone(), *k),
        Init::Field(f) => {
            if **f.grid() != **grid {
                return Err(Error::GridMismatch);
            }
            Ok(f.clone())
        }
    }
}

/// Jacobi iteration of the discrete QVI map until [`should_stop`] accepts
/// the delta history or `max_iters` is reached.
pub fn solve(problem: &ProblemSpec, grid: Arc<Grid>, form: QviForm, params: &SolverParams) -> Result<SolveReport> {
    if *params.step.grid != *grid {
        return Err(Error::GridMismatch);
    }
    match params.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| solve_inner(problem, grid, form, params))
        }
        None => solve_inner(problem, grid, form, params),
    }
}

fn solve_inner(problem: &ProblemSpec, grid: Arc<Grid>, form: QviForm, params: &SolverParams) -> Result<SolveReport> {
    let start = Instant::now();
    let threshold = divergence_threshold(problem, &grid);
    let beta = params.step.discount_factor();
    let mut field = initial_field(&params.init, &grid)?.with_form(form);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iters {
        let next = sweep(problem, &field, form, &params.step)?;
        iterations += 1;
        let norm = next.sup_norm();
        if norm > threshold {
            return Err(Error::Divergence { iteration: iterations, norm, threshold });
        }
        let delta = next.sup_norm_diff(&field)?;
        history.push(delta);
        field = next;
        if should_stop(&history, beta, params.tol_fix) {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        field,
        form,
        iterations,
        residual_history: history,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        h: params.step.h,
        tol_fix: params.tol_fix,
    })
}

/// Sup-norm distance between a lower-kind and an upper-kind solve.
pub fn isaacs_gap(lower: &SolveReport, upper: &SolveReport) -> Result<f64> {
    let paired = (lower.form == QviForm::L && upper.form == QviForm::U)
        || (lower.form == QviForm::L_MAX && upper.form == QviForm::U_MIN);
    if !paired && lower.form != upper.form {
        return Err(Error::FormMismatch(format!(
            "expected (L, U) or (Lmax, Umin), got ({}, {})",
            lower.form, upper.form
        )));
    }
    lower.field.sup_norm_diff(&upper.field)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma1Kind {
    /// `v > N v`.
    AboveN,
    /// `v < N v` and `v < M v`.
    BelowBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Lemma1Violation {
    pub node: usize,
    pub kind: Lemma1Kind,
    pub value: f64,
    pub n: f64,
    pub m: f64,
}

/// Obstacle-ordering check from precomputed node values of `v`, `N v`, `M v`.
pub fn lemma1_violations(values: &[f64], n: &[f64], m: &[f64], tol: f64) -> Vec<Lemma1Violation> {
    let mut out = Vec::new();
    for (node, ((&v, &nv), &mv)) in values.iter().zip(n).zip(m).enumerate() {
        if v > nv + tol {
            out.push(Lemma1Violation { node, kind: Lemma1Kind::AboveN, value: v, n: nv, m: mv });
        } else if v < nv - tol && v < mv - tol {
            out.push(Lemma1Violation { node, kind: Lemma1Kind::BelowBoth, value: v, n: nv, m: mv });
        }
    }
    out
}

/// Node values of `M v` and `N v`.
pub fn obstacles(field: &ValueField, problem: &ProblemSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = field.grid();
    if grid.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: grid.dim() });
    }
    // Interventions do not use the time step.
    let step = StepParams::new(0.5 / problem.discount(), grid.clone(), problem)?;
    let mut eval = PointEval::new(field, problem, &step);
    let mut x = vec![0.0; grid.dim()];
    let mut m = Vec::with_capacity(grid.len());
    let mut n = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.node_into(i, &mut x);
        m.push(eval.intervene(&x, Player::Xi).0);
        n.push(eval.intervene(&x, Player::Eta).0);
    }
    Ok((m, n))
}

/// `V <= N V` everywhere, and `V >= M V` wherever `V < N V`.
pub fn check_lemma1(report: &SolveReport, problem: &ProblemSpec, tol: f64) -> Result<Vec<Lemma1Violation>> {
    let (m, n) = obstacles(&report.field, problem)?;
    Ok(lemma1_violations(report.field.values(), &n, &m, tol))
}

/// `|f|_inf / lambda`, the a-priori bound on any fixed point.
pub fn value_bound(problem: &ProblemSpec, grid: &Grid) -> f64 {
    problem.gain_sup(grid) / problem.discount()
}

/// Largest ratio of consecutive deltas over the second half of the history,
/// ignoring deltas at rounding level.
pub fn tail_ratio(history: &[f64]) -> Option<f64> {
    let floor = 1e-13;
    let start = history.len() / 2;
    history[start..]
        .windows(2)
        .filter(|w| w[0] > floor && w[1] > floor)
        .map(|w| w[1] / w[0])
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

/// Solves the problem scaled by `mu` and returns `sup |v_mu - mu v|`.
pub fn mu_scaling_gap(
    problem: &ProblemSpec,
    base: &SolveReport,
    mu: f64,
    params: &SolverParams,
) -> Result<f64> {
    let scaled = problem.scaled_payoff(mu)?;
    let report = solve(&scaled, base.field.grid().clone(), base.form, params)?;
    report.ensure_converged()?;
    let expect: Vec<f64> = base.field.values().iter().map(|v| mu * v).collect();
    let expect = ValueField::new(base.field.grid().clone(), expect)?;
    report.field.sup_norm_diff(&expect)
}
