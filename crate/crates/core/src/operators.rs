//! Pointwise pieces of the discrete quasi-variational inequalities.
//!
//! The continuous part `lambda v + H(x, Dv) = 0` is discretized
//! semi-Lagrangian style: one step of length `h` along the drift, value
//! interpolated at the foot point, payoff discounted by `1 - lambda h`.
//! Intervention operators look up the field at every jump destination.
//! The four forms nest these three quantities differently.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ValueField};
use crate::problem::{ControlPair, Player, ProblemSpec};

/// Which Hamiltonian: lower (`sup_a inf_b`, minimizer moves second) or
/// upper (`inf_b sup_a`, maximizer moves second).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HamiltonianKind {
    Lower,
    Upper,
}

/// Outer operator of the residual expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nesting {
    /// `min{ max[lambda v + H, v - N v], v - M v } = 0`
    MinOuter,
    /// `max{ min[lambda v + H, v - M v], v - N v } = 0`
    MaxOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QviForm {
    pub hamiltonian: HamiltonianKind,
    pub nesting: Nesting,
}

impl QviForm {
    pub const L: QviForm = QviForm { hamiltonian: HamiltonianKind::Lower, nesting: Nesting::MinOuter };
    pub const U: QviForm = QviForm { hamiltonian: HamiltonianKind::Upper, nesting: Nesting::MaxOuter };
    pub const L_MAX: QviForm = QviForm { hamiltonian: HamiltonianKind::Lower, nesting: Nesting::MaxOuter };
    pub const U_MIN: QviForm = QviForm { hamiltonian: HamiltonianKind::Upper, nesting: Nesting::MinOuter };
    pub const ALL: [QviForm; 4] = [Self::L, Self::U, Self::L_MAX, Self::U_MIN];

    pub fn name(self) -> &'static str {
        match (self.hamiltonian, self.nesting) {
            (HamiltonianKind::Lower, Nesting::MinOuter) => "L",
            (HamiltonianKind::Upper, Nesting::MaxOuter) => "U",
            (HamiltonianKind::Lower, Nesting::MaxOuter) => "Lmax",
            (HamiltonianKind::Upper, Nesting::MinOuter) => "Umin",
        }
    }

    /// Discrete fixed-point right-hand side from the continuation value `s`
    /// and the intervention values `m` (xi) and `n` (eta).
    #[inline]
    pub fn combine(self, s: f64, m: f64, n: f64) -> f64 {
        match self.nesting {
            Nesting::MinOuter => s.min(n).max(m),
            Nesting::MaxOuter => s.max(m).min(n),
        }
    }

    /// Residual of the continuous form given `lambda v + H`, `v - N v`, `v - M v`.
    #[inline]
    pub fn residual(self, hamiltonian_term: f64, gap_n: f64, gap_m: f64) -> f64 {
        match self.nesting {
            Nesting::MinOuter => hamiltonian_term.max(gap_n).min(gap_m),
            Nesting::MaxOuter => hamiltonian_term.min(gap_m).max(gap_n),
        }
    }
}

impl fmt::Display for QviForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QviForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Self::L),
            "U" => Ok(Self::U),
            "Lmax" => Ok(Self::L_MAX),
            "Umin" => Ok(Self::U_MIN),
            other => Err(Error::Config(format!("unknown form `{other}` (expected L, U, Lmax or Umin)"))),
        }
    }
}

impl Serialize for QviForm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for QviForm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Time step of the discrete dynamic programming principle.
#[derive(Debug, Clone)]
pub struct StepParams {
    pub h: f64,
    pub grid: Arc<Grid>,
    discount: f64,
}

impl StepParams {
    pub fn new(h: f64, grid: Arc<Grid>, problem: &ProblemSpec) -> Result<Self> {
        let lh = problem.discount() * h;
        if !(h > 0.0) || !(lh < 1.0) || !h.is_finite() {
            return Err(Error::InvalidStep(lh));
        }
        Ok(Self { h, grid, discount: problem.discount() })
    }

    /// `h = dx_min / max(|b|_inf, 1)`, capped so that `lambda h <= 0.5`.
    pub fn auto(grid: Arc<Grid>, problem: &ProblemSpec) -> Result<Self> {
        let speed = problem.drift_sup(&grid).max(1.0);
        let h = (grid.min_spacing() / speed).min(0.5 / problem.discount());
        Self::new(h, grid, problem)
    }

    /// `1 - lambda h`.
    pub fn discount_factor(&self) -> f64 {
        1.0 - self.discount * self.h
    }

    pub fn lambda_h(&self) -> f64 {
        self.discount * self.h
    }
}

/// All three branch values at a point with their arg-optima.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branches {
    pub s: f64,
    pub s_arg: ControlPair,
    pub m: f64,
    pub m_arg: usize,
    pub n: f64,
    pub n_arg: usize,
}

/// Reusable scratch space for pointwise evaluation.
pub(crate) struct PointEval<'a> {
    field: &'a ValueField,
    problem: &'a ProblemSpec,
    h: f64,
    beta: f64,
    vel: Vec<f64>,
    foot: Vec<f64>,
}

impl<'a> PointEval<'a> {
    pub(crate) fn new(field: &'a ValueField, problem: &'a ProblemSpec, params: &StepParams) -> Self {
        let dim = problem.dim();
        Self {
            field,
            problem,
            h: params.h,
            beta: params.discount_factor(),
            vel: vec![0.0; dim],
            foot: vec![0.0; dim],
        }
    }

    /// `h f + (1 - lambda h) v(x + h b)` for one control pair.
    #[inline]
    fn step_value(&mut self, x: &[f64], pair: ControlPair) -> f64 {
        self.problem.drift_into(x, pair, &mut self.vel);
        for k in 0..x.len() {
            self.foot[k] = x[k] + self.h * self.vel[k];
        }
        self.h * self.problem.gain_at(x, pair) + self.beta * self.field.interp_unchecked(&self.foot)
    }

    pub(crate) fn sl(&mut self, x: &[f64], kind: HamiltonianKind) -> (f64, ControlPair) {
        let na = self.problem.ctrl_a().len();
        let nb = self.problem.ctrl_b().len();
        let mut best = match kind {
            HamiltonianKind::Lower => f64::NEG_INFINITY,
            HamiltonianKind::Upper => f64::INFINITY,
        };
        let mut best_arg = ControlPair { a: 0, b: 0 };
        match kind {
            HamiltonianKind::Lower => {
                for a in 0..na {
                    let mut inner = f64::INFINITY;
                    let mut inner_b = 0;
                    for b in 0..nb {
                        let v = self.step_value(x, ControlPair { a, b });
                        if v < inner {
                            inner = v;
                            inner_b = b;
                        }
                    }
                    if inner > best {
                        best = inner;
                        best_arg = ControlPair { a, b: inner_b };
                    }
                }
            }
            HamiltonianKind::Upper => {
                for b in 0..nb {
                    let mut inner = f64::NEG_INFINITY;
                    let mut inner_a = 0;
                    for a in 0..na {
                        let v = self.step_value(x, ControlPair { a, b });
                        if v > inner {
                            inner = v;
                            inner_a = a;
                        }
                    }
                    if inner < best {
                        best = inner;
                        best_arg = ControlPair { a: inner_a, b };
                    }
                }
            }
        }
        (best, best_arg)
    }

    pub(crate) fn intervene(&mut self, x: &[f64], player: Player) -> (f64, usize) {
        let count = self.problem.impulse_set(player).len();
        let mut best = match player {
            Player::Xi => f64::NEG_INFINITY,
            Player::Eta => f64::INFINITY,
        };
        let mut arg = 0;
        for k in 0..count {
            self.problem.jump_into(player, x, k, &mut self.vel);
            for i in 0..x.len() {
                self.foot[i] = x[i] + self.vel[i];
            }
            let v = self.field.interp_unchecked(&self.foot);
            let c = self.problem.cost_at(player, x, k);
            match player {
                Player::Xi => {
                    let val = v - c;
                    if val > best {
                        best = val;
                        arg = k;
                    }
                }
                Player::Eta => {
                    let val = v + c;
                    if val < best {
                        best = val;
                        arg = k;
                    }
                }
            }
        }
        (best, arg)
    }

    pub(crate) fn branches(&mut self, x: &[f64], kind: HamiltonianKind) -> Branches {
        let (s, s_arg) = self.sl(x, kind);
        let (m, m_arg) = self.intervene(x, Player::Xi);
        let (n, n_arg) = self.intervene(x, Player::Eta);
        Branches { s, s_arg, m, m_arg, n, n_arg }
    }

    #[inline]
    pub(crate) fn update(&mut self, x: &[f64], form: QviForm) -> f64 {
        let (s, _) = self.sl(x, form.hamiltonian);
        let (m, _) = self.intervene(x, Player::Xi);
        let (n, _) = self.intervene(x, Player::Eta);
        form.combine(s, m, n)
    }
}

fn check_point(field: &ValueField, problem: &ProblemSpec, x: &[f64]) -> Result<()> {
    if field.grid().dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: field.grid().dim() });
    }
    if x.len() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation point".into()));
    }
    Ok(())
}

fn check_drift(problem: &ProblemSpec, x: &[f64]) -> Result<()> {
    let mut v = vec![0.0; problem.dim()];
    for pair in problem.control_pairs() {
        problem.drift_into(x, pair, &mut v);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("drift at {x:?} under {pair:?}")));
        }
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Semi-Lagrangian continuation value at `x`.
///
/// Lower: `max_a min_b [h f + (1 - lambda h) v(x + h b)]`; upper swaps the
/// order. Returns the first optimal pair in enumeration order.
pub fn sl_value(
    field: &ValueField,
    problem: &ProblemSpec,
    x: &[f64],
    params: &StepParams,
    kind: HamiltonianKind,
) -> Result<(f64, ControlPair)> {
    check_point(field, problem, x)?;
    check_drift(problem, x)?;
    let (v, arg) = PointEval::new(field, problem, params).sl(x, kind);
    Ok((finite(v, "continuation value")?, arg))
}

/// Intervention operator: `M v(x) = max_xi [v(x + g) - c]` for `Player::Xi`,
/// `N v(x) = min_eta [v(x + g) + chi]` for `Player::Eta`.
pub fn intervene(field: &ValueField, problem: &ProblemSpec, x: &[f64], player: Player) -> Result<(f64, usize)> {
    check_point(field, problem, x)?;
    // The step is irrelevant to interventions.
    let params = StepParams { h: 0.0, grid: field.grid().clone(), discount: problem.discount() };
    let (v, arg) = PointEval::new(field, problem, &params).intervene(x, player);
    Ok((finite(v, "intervention value")?, arg))
}

/// All three branch values at `x` for the form's Hamiltonian kind.
pub fn branches(
    field: &ValueField,
    problem: &ProblemSpec,
    x: &[f64],
    kind: HamiltonianKind,
    params: &StepParams,
) -> Result<Branches> {
    check_point(field, problem, x)?;
    check_drift(problem, x)?;
    let b = PointEval::new(field, problem, params).branches(x, kind);
    finite(b.s, "continuation value")?;
    finite(b.m, "xi intervention value")?;
    finite(b.n, "eta intervention value")?;
    Ok(b)
}

/// One application of the discrete QVI map at `x`.
pub fn qvi_update(
    field: &ValueField,
    problem: &ProblemSpec,
    x: &[f64],
    form: QviForm,
    params: &StepParams,
) -> Result<f64> {
    let b = branches(field, problem, x, form.hamiltonian, params)?;
    Ok(form.combine(b.s, b.m, b.n))
}

/// `H(x, p)` by enumeration of `-p.b - f` over the control sets:
/// lower is `inf_a sup_b`, upper is `sup_b inf_a`.
pub fn hamiltonian(problem: &ProblemSpec, x: &[f64], p: &[f64], kind: HamiltonianKind) -> f64 {
    let mut vel = vec![0.0; problem.dim()];
    let na = problem.ctrl_a().len();
    let nb = problem.ctrl_b().len();
    let mut term = |a: usize, b: usize| {
        let pair = ControlPair { a, b };
        problem.drift_into(x, pair, &mut vel);
        let pb: f64 = p.iter().zip(&vel).map(|(u, v)| u * v).sum();
        -pb - problem.gain_at(x, pair)
    };
    match kind {
        HamiltonianKind::Lower => (0..na)
            .map(|a| (0..nb).map(|b| term(a, b)).fold(f64::NEG_INFINITY, f64::max))
            .fold(f64::INFINITY, f64::min),
        HamiltonianKind::Upper => (0..nb)
            .map(|b| (0..na).map(|a| term(a, b)).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Pointwise residual of the continuous QVI with a finite-difference
/// gradient: central differences inside, one-sided on the boundary.
pub fn hjbi_residual(field: &ValueField, problem: &ProblemSpec, form: QviForm) -> Result<ValueField> {
    let grid = field.grid().clone();
    if grid.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: grid.dim() });
    }
    if let Some(axis) = grid.nodes_per_axis().iter().position(|&n| n < 3) {
        return Err(Error::TooFewNodes { axis, nodes: grid.nodes_per_axis()[axis] });
    }
    let dim = grid.dim();
    let values = field.values();
    let lambda = problem.discount();
    let params = StepParams { h: 0.0, grid: grid.clone(), discount: lambda };
    let mut eval = PointEval::new(field, problem, &params);
    let mut x = vec![0.0; dim];
    let mut p = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    let mut out = Vec::with_capacity(grid.len());
    for flat in 0..grid.len() {
        grid.node_into(flat, &mut x);
        grid.multi_index(flat, &mut idx);
        for a in 0..dim {
            let s = grid.strides()[a];
            let dx = grid.spacing()[a];
            let last = grid.nodes_per_axis()[a] - 1;
            p[a] = if idx[a] == 0 {
                (values[flat + s] - values[flat]) / dx
            } else if idx[a] == last {
                (values[flat] - values[flat - s]) / dx
            } else {
                (values[flat + s] - values[flat - s]) / (2.0 * dx)
            };
        }
        let v = values[flat];
        let ham = lambda * v + hamiltonian(problem, &x, &p, form.hamiltonian);
        let (m, _) = eval.intervene(&x, Player::Xi);
        let (n, _) = eval.intervene(&x, Player::Eta);
        out.push(form.residual(ham, v - n, v - m));
    }
    ValueField::new(grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_builtin, Params};

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn grid1(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[lo], &[hi], &[n]).unwrap())
    }

    #[test]
    fn form_names_round_trip() {
        for f in QviForm::ALL {
            assert_eq!(f.name().parse::<QviForm>().unwrap(), f);
        }
        assert!("X".parse::<QviForm>().is_err());
    }

    #[test]
    fn nesting_arithmetic() {
        assert_eq!(QviForm::L.combine(1.0, 4.0, 6.0), 4.0);
        assert_eq!(QviForm::U.combine(1.0, 4.0, 6.0), 4.0);
        assert_eq!(QviForm::L.combine(2.0, 1.0, 3.0), 2.0);
        // Lmax nests like U, Umin like L.
        assert_eq!(QviForm::L_MAX.combine(7.0, 4.0, 6.0), 6.0);
        assert_eq!(QviForm::U_MIN.combine(7.0, 4.0, 6.0), 6.0);
        assert_eq!(QviForm::L_MAX.combine(1.0, 5.0, 3.0), 3.0);
        assert_eq!(QviForm::U_MIN.combine(1.0, 5.0, 3.0), 5.0);
    }

    #[test]
    fn constant_problem_sl_values() {
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("lambda", 1.0), ("kappa", 1.0)])).unwrap();
        let g = grid1(-1.0, 1.0, 11);
        let step = StepParams::new(0.1, g.clone(), &p).unwrap();
        let zero = ValueField::constant(g.clone(), 0.0).unwrap();
        let (v, _) = sl_value(&zero, &p, &[0.3], &step, HamiltonianKind::Lower).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        let two = ValueField::constant(g, 2.0).unwrap();
        for kind in [HamiltonianKind::Lower, HamiltonianKind::Upper] {
            let (v, _) = sl_value(&two, &p, &[0.3], &step, kind).unwrap();
            assert!((v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_problem_at_fixed_point() {
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("kappa", 1.0)])).unwrap();
        let g = grid1(-1.0, 1.0, 11);
        let step = StepParams::new(0.1, g.clone(), &p).unwrap();
        let two = ValueField::constant(g, 2.0).unwrap();
        let b = branches(&two, &p, &[0.0], HamiltonianKind::Lower, &step).unwrap();
        assert!((b.s - 2.0).abs() < 1e-15);
        assert_eq!(b.m, 1.0);
        assert_eq!(b.n, 3.0);
        let v = qvi_update(&two, &p, &[0.0], QviForm::L, &step).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn intervention_on_constant_field() {
        let p = make_builtin("constant", &params(&[("kappa", 1.0)])).unwrap();
        let five = ValueField::constant(grid1(-1.0, 1.0, 5), 5.0).unwrap();
        assert_eq!(intervene(&five, &p, &[0.0], Player::Eta).unwrap().0, 6.0);
        assert_eq!(intervene(&five, &p, &[0.0], Player::Xi).unwrap().0, 4.0);
    }

    #[test]
    fn impulse1d_eta_intervention_from_three() {
        // Brute force over the candidate list against min(x^2, 4) on [-3, 3].
        let p = make_builtin("impulse1d", &params(&[("lambda", 1.0), ("kappa", 4.0), ("W", 4.0)])).unwrap();
        let g = grid1(-3.0, 3.0, 241);
        let f = ValueField::from_fn(g, |x| (x[0] * x[0]).min(4.0)).unwrap();
        let (n, arg) = intervene(&f, &p, &[3.0], Player::Eta).unwrap();
        assert!((n - 4.0).abs() < 1e-12, "{n}");
        assert_eq!(p.impulse_set(Player::Eta).get(arg), &[-3.0]);
    }

    #[test]
    fn linear1d_sl_at_origin_matches_enumeration() {
        // Hand enumeration of the 3x3 table: foot points 0.1*(a+b), f(0) = 0.
        let p = make_builtin("linear1d", &params(&[("lambda", 1.0), ("scale", 1.0)])).unwrap();
        let g = grid1(-1.0, 1.0, 21);
        let step = StepParams::new(0.1, g.clone(), &p).unwrap();
        let f = ValueField::from_fn(g, |x| x[0] * x[0]).unwrap();
        let table = |a: f64, b: f64| 0.9 * f.interpolate(&[0.1 * (a + b)]).unwrap();
        let ctrl = [-1.0, 0.0, 1.0];
        let lower = ctrl
            .iter()
            .map(|&a| ctrl.iter().map(|&b| table(a, b)).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max);
        let upper = ctrl
            .iter()
            .map(|&b| ctrl.iter().map(|&a| table(a, b)).fold(f64::NEG_INFINITY, f64::max))
            .fold(f64::INFINITY, f64::min);
        let (lo, _) = sl_value(&f, &p, &[0.0], &step, HamiltonianKind::Lower).unwrap();
        let (up, _) = sl_value(&f, &p, &[0.0], &step, HamiltonianKind::Upper).unwrap();
        assert_eq!(lo, lower);
        assert_eq!(up, upper);
        // The minimizer cancels any push when it moves second; when it moves
        // first the maximizer gets one cell out.
        assert_eq!(lo, 0.0);
        assert!((up - 0.9 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn first_optimum_wins_ties() {
        let p = make_builtin("linear1d", &Params::new()).unwrap();
        let g = grid1(-1.0, 1.0, 21);
        let step = StepParams::new(0.1, g.clone(), &p).unwrap();
        let flat = ValueField::constant(g, 1.0).unwrap();
        let (_, arg) = sl_value(&flat, &p, &[0.0], &step, HamiltonianKind::Lower).unwrap();
        assert_eq!(arg, ControlPair { a: 0, b: 0 });
        let zero = ValueField::constant(flat.grid().clone(), 0.0).unwrap();
        let (_, k) = intervene(&zero, &p, &[0.0], Player::Eta).unwrap();
        assert_eq!(k, 0);
    }

    #[test]
    fn step_params_validate() {
        let p = make_builtin("constant", &params(&[("lambda", 2.0)])).unwrap();
        let g = grid1(-1.0, 1.0, 11);
        assert!(StepParams::new(0.5, g.clone(), &p).is_err());
        assert!(StepParams::new(0.0, g.clone(), &p).is_err());
        assert!(StepParams::new(0.4, g.clone(), &p).is_ok());
        let auto = StepParams::auto(g, &p).unwrap();
        assert!(auto.lambda_h() <= 0.5);
        assert!((auto.h - 0.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_drift_is_an_error() {
        use crate::problem::PointSet;
        let one = PointSet::scalars(&[0.0]).unwrap();
        let p = ProblemSpec::builder("nan", 1)
            .drift(|_, _, _, out| out[0] = f64::NAN)
            .gain(|_, _, _| 0.0)
            .jump_xi(|_, a, out| out.copy_from_slice(a))
            .jump_eta(|_, a, out| out.copy_from_slice(a))
            .cost_xi(|_, _| 1.0)
            .cost_eta(|_, _| 1.0)
            .controls(one.clone(), one.clone())
            .impulses(one.clone(), one)
            .build()
            .unwrap();
        let g = grid1(-1.0, 1.0, 5);
        let step = StepParams::new(0.1, g.clone(), &p).unwrap();
        let f = ValueField::constant(g, 0.0).unwrap();
        assert!(matches!(
            sl_value(&f, &p, &[0.0], &step, HamiltonianKind::Lower),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn residual_vanishes_at_constant_fixed_point() {
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("kappa", 1.0)])).unwrap();
        let g = grid1(-1.0, 1.0, 11);
        let two = ValueField::constant(g, 2.0).unwrap();
        for form in QviForm::ALL {
            let r = hjbi_residual(&two, &p, form).unwrap();
            assert!(r.sup_norm() < 1e-15, "{form}");
        }
    }

    #[test]
    fn residual_of_zero_field_is_negative() {
        // At v = 0: lambda v + H = -2, v - N = -1, v - M = +1, so
        // min(max(-2, -1), 1) = -1 for (L).
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("kappa", 1.0)])).unwrap();
        let zero = ValueField::constant(grid1(-1.0, 1.0, 11), 0.0).unwrap();
        let r = hjbi_residual(&zero, &p, QviForm::L).unwrap();
        for &v in r.values() {
            assert_eq!(v, -1.0);
        }
    }

    #[test]
    fn residual_needs_interior_nodes() {
        let p = make_builtin("constant", &Params::new()).unwrap();
        let f = ValueField::constant(grid1(-1.0, 1.0, 2), 0.0).unwrap();
        assert!(hjbi_residual(&f, &p, QviForm::L).is_err());
    }

    #[test]
    fn linear1d_hamiltonians_agree() {
        let p = make_builtin("linear1d", &params(&[("scale", 1.0)])).unwrap();
        for i in 0..21 {
            let x = -1.0 + 0.1 * i as f64;
            for q in [-3.0, -1.0, -0.25, 0.0, 0.5, 2.0, 7.5] {
                let lo = hamiltonian(&p, &[x], &[q], HamiltonianKind::Lower);
                let up = hamiltonian(&p, &[x], &[q], HamiltonianKind::Upper);
                assert_eq!(lo, up, "x={x} p={q}");
            }
        }
    }

    fn separated() -> ProblemSpec {
        let ctrl = PointSet::scalars(&[-1.0, 0.0, 1.0]).unwrap();
        let jumps = PointSet::scalars(&[-0.5, 0.5]).unwrap();
        ProblemSpec::builder("separated", 1)
            .drift(|_, a, _, out| out[0] = a[0])
            .gain(|x, _, b| x[0] * x[0] + 0.3 * b[0])
            .jump_xi(|_, a, out| out.copy_from_slice(a))
            .jump_eta(|_, a, out| out.copy_from_slice(a))
            .cost_xi(|_, _| 1.0)
            .cost_eta(|_, _| 1.0)
            .controls(ctrl.clone(), ctrl)
            .impulses(jumps.clone(), jumps)
            .build()
            .unwrap()
    }

    use crate::problem::PointSet;
    use proptest::prelude::*;

    fn random_field() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0..5.0f64, 21)
    }

    fn problems() -> Vec<ProblemSpec> {
        vec![
            make_builtin("linear1d", &Params::new()).unwrap(),
            make_builtin("impulse1d", &params(&[("W", 1.0), ("n_eta", 11.0)])).unwrap(),
            separated(),
        ]
    }

    proptest! {
        #[test]
        fn update_is_monotone(base in random_field(), bump in proptest::collection::vec(0.0..2.0f64, 21)) {
            let g = grid1(-1.0, 1.0, 21);
            let f1 = ValueField::new(g.clone(), base.clone()).unwrap();
            let f2 = ValueField::new(g.clone(), base.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
            for p in problems() {
                let step = StepParams::new(0.05, g.clone(), &p).unwrap();
                for i in 0..g.len() {
                    let x = g.node(i);
                    for form in QviForm::ALL {
                        let a = qvi_update(&f1, &p, &x, form, &step).unwrap();
                        let b = qvi_update(&f2, &p, &x, form, &step).unwrap();
                        prop_assert!(a <= b);
                    }
                    for player in [Player::Xi, Player::Eta] {
                        prop_assert!(intervene(&f1, &p, &x, player).unwrap().0 <= intervene(&f2, &p, &x, player).unwrap().0);
                    }
                }
            }
        }

        #[test]
        fn constant_shift_bounds(base in random_field(), k in prop::sample::select(vec![0.1, 1.0, 10.0])) {
            let g = grid1(-1.0, 1.0, 21);
            let f = ValueField::new(g.clone(), base.clone()).unwrap();
            let fk = ValueField::new(g.clone(), base.iter().map(|v| v + k).collect()).unwrap();
            for p in problems() {
                let step = StepParams::new(0.05, g.clone(), &p).unwrap();
                let beta = step.discount_factor();
                for i in 0..g.len() {
                    let x = g.node(i);
                    for form in QviForm::ALL {
                        let d = qvi_update(&fk, &p, &x, form, &step).unwrap() - qvi_update(&f, &p, &x, form, &step).unwrap();
                        let slack = 1e-12 * (1.0 + k + 5.0);
                        prop_assert!(d <= k + slack && d >= beta * k - slack, "d={} k={}", d, k);
                    }
                }
            }
        }

        #[test]
        fn separated_sl_values_coincide(base in random_field(), h in 0.01..0.5f64) {
            let g = grid1(-1.0, 1.0, 21);
            let f = ValueField::new(g.clone(), base).unwrap();
            let p = separated();
            let step = StepParams::new(h, g.clone(), &p).unwrap();
            for i in 0..g.len() {
                let x = g.node(i);
                let lo = sl_value(&f, &p, &x, &step, HamiltonianKind::Lower).unwrap().0;
                let up = sl_value(&f, &p, &x, &step, HamiltonianKind::Upper).unwrap().0;
                prop_assert!((lo - up).abs() <= 1e-12 * (1.0 + lo.abs()), "{} vs {}", lo, up);
            }
        }

        #[test]
        fn intervention_preserves_lipschitz_bound(base in random_field()) {
            let g = grid1(-1.0, 1.0, 21);
            let f = ValueField::new(g.clone(), base).unwrap();
            let lip = f.lipschitz_seminorm();
            for p in problems() {
                let hints = *p.hints();
                for player in [Player::Xi, Player::Eta] {
                    let (cg, cc) = match player {
                        Player::Xi => (hints.jump_xi.unwrap_or(0.0), hints.cost_xi.unwrap_or(0.0)),
                        Player::Eta => (hints.jump_eta.unwrap_or(0.0), hints.cost_eta.unwrap_or(0.0)),
                    };
                    let mapped = ValueField::from_fn(g.clone(), |x| intervene(&f, &p, x, player).unwrap().0).unwrap();
                    // Rounding of values near the large disabling cost.
                    let slack = 1e-12 * (1.0 + mapped.sup_norm()) / g.min_spacing();
                    prop_assert!(mapped.lipschitz_seminorm() <= lip * (1.0 + cg) + cc + slack, "{}", p.name());
                }
            }
        }
    }
}
