//! Independent solvers for small instances, used to certify the grid solver.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, ValueField, MAX_DIM};
use crate::operators::{HamiltonianKind, PointEval, QviForm, StepParams};
use crate::problem::{ControlPair, Player, ProblemSpec};
use crate::solver::{divergence_threshold, should_stop};

/// Default cap on memoized tree nodes.
pub const DEFAULT_TREE_BUDGET: usize = 4_000_000;

/// States visited by the tree are rounded to multiples of this, so that
/// jump sums reached in different orders share a memo entry.
const STATE_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

/// Extra width on top of the discount tail, covering state quantization
/// and summation rounding.
const PAD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueInterval {
    pub lo: f64,
    pub hi: f64,
    /// The K-step truncated value at the centre of the bracket.
    pub value: f64,
}

impl ValueInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Containment after widening both ends by `inflate`.
    pub fn contains_within(&self, v: f64, inflate: f64) -> bool {
        self.lo - inflate <= v && v <= self.hi + inflate
    }
}

type Key = (u32, [i64; MAX_DIM]);

struct Tree<'a> {
    problem: &'a ProblemSpec,
    form: QviForm,
    h: f64,
    beta: f64,
    budget: usize,
    cont: HashMap<Key, f64>,
    full: HashMap<Key, f64>,
}

fn key(depth: usize, x: &[f64]) -> Key {
    let mut k = [0i64; MAX_DIM];
    for (slot, v) in k.iter_mut().zip(x) {
        *slot = (v / STATE_QUANTUM).round() as i64;
    }
    (depth as u32, k)
}

fn quantize(x: &mut [f64]) {
    for v in x {
        *v = (*v / STATE_QUANTUM).round() * STATE_QUANTUM;
    }
}

impl<'a> Tree<'a> {
    fn check_budget(&self) -> Result<()> {
        if self.cont.len() + self.full.len() > self.budget {
            Err(Error::BudgetExceeded { budget: self.budget })
        } else {
            Ok(())
        }
    }

    /// Value with `depth` levels left, impulses allowed at this level.
    fn full(&mut self, depth: usize, x: &[f64]) -> Result<f64> {
        if depth == 0 {
            return Ok(0.0);
        }
        let k = key(depth, x);
        if let Some(&v) = self.full.get(&k) {
            return Ok(v);
        }
        let s = self.cont(depth, x)?;
        let m = self.impulse(depth, x, Player::Xi)?;
        let n = self.impulse(depth, x, Player::Eta)?;
        let v = self.form.combine(s, m, n);
        self.full.insert(k, v);
        self.check_budget()?;
        Ok(v)
    }

    fn impulse(&mut self, depth: usize, x: &[f64], player: Player) -> Result<f64> {
        let problem = self.problem;
        let mut g = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        let mut best = match player {
            Player::Xi => f64::NEG_INFINITY,
            Player::Eta => f64::INFINITY,
        };
        for a in 0..problem.impulse_set(player).len() {
            problem.jump_into(player, x, a, &mut g);
            for i in 0..x.len() {
                y[i] = x[i] + g[i];
            }
            quantize(&mut y);
            let c = problem.cost_at(player, x, a);
            let v = self.cont(depth, &y)?;
            best = match player {
                Player::Xi => best.max(v - c),
                Player::Eta => best.min(v + c),
            };
        }
        Ok(best)
    }

    /// One flow step of length `h` from `x`, no impulse at this level.
    fn cont(&mut self, depth: usize, x: &[f64]) -> Result<f64> {
        let k = key(depth, x);
        if let Some(&v) = self.cont.get(&k) {
            return Ok(v);
        }
        let problem = self.problem;
        let na = problem.ctrl_a().len();
        let nb = problem.ctrl_b().len();
        let mut table = vec![0.0; na * nb];
        let mut vel = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for a in 0..na {
            for b in 0..nb {
                let pair = ControlPair { a, b };
                problem.drift_into(x, pair, &mut vel);
                for i in 0..x.len() {
                    y[i] = x[i] + self.h * vel[i];
                }
                quantize(&mut y);
                let next = self.full(depth - 1, &y)?;
                table[a * nb + b] = self.h * problem.gain_at(x, pair) + self.beta * next;
            }
        }
        let v = match self.form.hamiltonian {
            HamiltonianKind::Lower => (0..na)
                .map(|a| table[a * nb..(a + 1) * nb].iter().copied().fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max),
            HamiltonianKind::Upper => (0..nb)
                .map(|b| (0..na).map(|a| table[a * nb + b]).fold(f64::NEG_INFINITY, f64::max))
                .fold(f64::INFINITY, f64::min),
        };
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("tree value at {x:?}")));
        }
        self.cont.insert(k, v);
        self.check_budget()?;
        Ok(v)
    }
}

/// Backward induction over the `depth`-level decision tree without any grid.
///
/// Each level offers one impulse per player (nested per the form) followed
/// by one flow step; leaves are valued at 0. The bracket is padded by
/// `(1 - lambda h)^K |f|_inf / lambda`, with the sup taken over `params.grid`.
pub fn tree_value(
    problem: &ProblemSpec,
    x0: &[f64],
    depth: usize,
    params: &StepParams,
    form: QviForm,
) -> Result<ValueInterval> {
    tree_value_with_budget(problem, x0, depth, params, form, DEFAULT_TREE_BUDGET)
}

pub fn tree_value_with_budget(
    problem: &ProblemSpec,
    x0: &[f64],
    depth: usize,
    params: &StepParams,
    form: QviForm,
    budget: usize,
) -> Result<ValueInterval> {
    if x0.len() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tree root".into()));
    }
    let mut tree = Tree {
        problem,
        form,
        h: params.h,
        beta: params.discount_factor(),
        budget,
        cont: HashMap::new(),
        full: HashMap::new(),
    };
    let mut root = x0.to_vec();
    quantize(&mut root);
    let value = tree.full(depth, &root)?;
    let tail = params.discount_factor().powi(depth as i32) * problem.gain_sup(&params.grid) / problem.discount();
    let pad = tail + PAD_SLACK * (1.0 + value.abs());
    Ok(ValueInterval { lo: value - pad, hi: value + pad, value })
}

/// In-place lexicographic sweeps using the freshest values, with the
/// automatic step of the grid.
pub fn gauss_seidel_solve(problem: &ProblemSpec, grid: Arc<Grid>, form: QviForm, tol: f64) -> Result<ValueField> {
    let step = StepParams::auto(grid, problem)?;
    gauss_seidel_solve_with(problem, &step, form, tol, 1_000_000)
}

pub fn gauss_seidel_solve_with(
    problem: &ProblemSpec,
    step: &StepParams,
    form: QviForm,
    tol: f64,
    max_iters: usize,
) -> Result<ValueField> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParam { name: "tol".into(), reason: format!("must be > 0, got {tol}") });
    }
    let grid = step.grid.clone();
    if grid.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: grid.dim() });
    }
    let threshold = divergence_threshold(problem, &grid);
    let beta = step.discount_factor();
    let mut history = Vec::new();
    let mut field = ValueField::constant(grid.clone(), 0.0)?;
    let mut x = vec![0.0; grid.dim()];
    for iteration in 1..=max_iters {
        let mut delta = 0.0f64;
        for i in 0..grid.len() {
            grid.node_into(i, &mut x);
            let v = PointEval::new(&field, problem, step).update(&x, form);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("update at node {i}")));
            }
            let slot = &mut field.values_mut()[i];
            delta = delta.max((v - *slot).abs());
            *slot = v;
        }
        let norm = field.sup_norm();
        if norm > threshold {
            return Err(Error::Divergence { iteration, norm, threshold });
        }
        history.push(delta);
        if should_stop(&history, beta, tol) {
            return Ok(field.with_form(form));
        }
    }
    Err(Error::NotConverged { iterations: max_iters, last_delta: history.last().copied().unwrap_or(f64::NAN) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_builtin, Params};
    use crate::solver::{solve, SolverParams};

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn grid1(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[lo], &[hi], &[n]).unwrap())
    }

    #[test]
    fn constant_tree_brackets_two() {
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("lambda", 1.0), ("kappa", 1.0)])).unwrap();
        let step = StepParams::new(0.1, grid1(-1.0, 1.0, 11), &p).unwrap();
        for form in QviForm::ALL {
            let iv = tree_value(&p, &[0.3], 20, &step, form).unwrap();
            assert!(iv.contains(2.0), "{form}: {iv:?}");
            assert!(iv.width() <= 2.0 * 0.9f64.powi(20) * 2.0 + 1e-8);
            assert!((iv.value - 2.0 * (1.0 - 0.9f64.powi(20))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_problem_tree_is_centred_at_zero() {
        let p = make_builtin("constant", &params(&[("f0", 0.0)])).unwrap();
        let step = StepParams::new(0.1, grid1(-1.0, 1.0, 11), &p).unwrap();
        let iv = tree_value(&p, &[0.0], 10, &step, QviForm::L).unwrap();
        assert_eq!(iv.value, 0.0);
        assert!(iv.contains(0.0));
    }

    #[test]
    fn impulse1d_tree_contains_four() {
        let p = make_builtin("impulse1d", &params(&[("lambda", 1.0), ("kappa", 4.0), ("W", 4.0)])).unwrap();
        let step = StepParams::new(0.2, grid1(-3.0, 3.0, 241), &p).unwrap();
        let iv = tree_value(&p, &[3.0], 15, &step, QviForm::U).unwrap();
        assert!(iv.contains(4.0), "{iv:?}");
    }

    #[test]
    fn budget_is_enforced() {
        let p = make_builtin("linear1d", &Params::new()).unwrap();
        let step = StepParams::new(0.1, grid1(-1.0, 1.0, 21), &p).unwrap();
        let r = tree_value_with_budget(&p, &[0.0], 12, &step, QviForm::L, 50);
        assert!(matches!(r, Err(Error::BudgetExceeded { budget: 50 })));
    }

    #[test]
    fn gauss_seidel_constant() {
        let p = make_builtin("constant", &params(&[("f0", 2.0)])).unwrap();
        let f = gauss_seidel_solve(&p, grid1(-1.0, 1.0, 21), QviForm::L, 1e-10).unwrap();
        for &v in f.values() {
            assert!((v - 2.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn gauss_seidel_agrees_with_jacobi() {
        let p = make_builtin("linear1d", &Params::new()).unwrap();
        let g = grid1(-1.0, 1.0, 41);
        let tol = 1e-9;
        for form in QviForm::ALL {
            let gs = gauss_seidel_solve(&p, g.clone(), form, tol).unwrap();
            let sp = SolverParams::new(StepParams::auto(g.clone(), &p).unwrap(), tol, 100_000).unwrap();
            let jac = solve(&p, g.clone(), form, &sp).unwrap();
            assert!(gs.sup_norm_diff(&jac.field).unwrap() <= 4.0 * tol);
        }
    }
}
