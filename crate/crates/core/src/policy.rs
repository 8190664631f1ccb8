//! Feedback policies read off a converged field, and forward simulation of
//! the controlled system with impulse accounting.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::{PointEval, QviForm, StepParams};
use crate::problem::{ControlPair, Player, ProblemSpec};
use crate::solver::SolveReport;

pub const DEFAULT_MAX_CONSECUTIVE_IMPULSES: usize = 10;

/// What a node asks for. A node may carry an impulse demand from either
/// player; when both are present the minimizer's wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodePolicy {
    pub control: ControlPair,
    pub xi: Option<usize>,
    pub eta: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continuous(ControlPair),
    ImpulseXi(usize),
    ImpulseEta(usize),
}

impl NodePolicy {
    pub fn continuous(control: ControlPair) -> Self {
        Self { control, xi: None, eta: None }
    }

    pub fn decision(&self) -> Decision {
        match (self.eta, self.xi) {
            (Some(e), _) => Decision::ImpulseEta(e),
            (None, Some(x)) => Decision::ImpulseXi(x),
            (None, None) => Decision::Continuous(self.control),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyField {
    grid: Arc<Grid>,
    nodes: Vec<NodePolicy>,
    form: QviForm,
}

impl PolicyField {
    pub fn new(grid: Arc<Grid>, nodes: Vec<NodePolicy>, form: QviForm, problem: &ProblemSpec) -> Result<Self> {
        if nodes.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: nodes.len() });
        }
        let na = problem.ctrl_a().len();
        let nb = problem.ctrl_b().len();
        let nx = problem.impulse_set(Player::Xi).len();
        let ne = problem.impulse_set(Player::Eta).len();
        for n in &nodes {
            if n.control.a >= na {
                return Err(Error::IndexOutOfRange { what: "ctrl_a", index: n.control.a, len: na });
            }
            if n.control.b >= nb {
                return Err(Error::IndexOutOfRange { what: "ctrl_b", index: n.control.b, len: nb });
            }
            if let Some(i) = n.xi.filter(|&i| i >= nx) {
                return Err(Error::IndexOutOfRange { what: "impulse_xi", index: i, len: nx });
            }
            if let Some(i) = n.eta.filter(|&i| i >= ne) {
                return Err(Error::IndexOutOfRange { what: "impulse_eta", index: i, len: ne });
            }
        }
        Ok(Self { grid, nodes, form })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn form(&self) -> QviForm {
        self.form
    }

    pub fn nodes(&self) -> &[NodePolicy] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodePolicy {
        &self.nodes[i]
    }

    /// Decision at the node nearest to `x`.
    pub fn lookup(&self, x: &[f64]) -> &NodePolicy {
        &self.nodes[self.grid.nearest_node(x)]
    }

    /// Takes the maximizer's impulse demands from `xi_from` and the
    /// minimizer's from `eta_from`; continuous controls come from `xi_from`.
    pub fn combine(xi_from: &PolicyField, eta_from: &PolicyField) -> Result<PolicyField> {
        if *xi_from.grid != *eta_from.grid {
            return Err(Error::GridMismatch);
        }
        let nodes = xi_from
            .nodes
            .iter()
            .zip(&eta_from.nodes)
            .map(|(a, b)| NodePolicy { control: a.control, xi: a.xi, eta: b.eta })
            .collect();
        Ok(PolicyField { grid: xi_from.grid.clone(), nodes, form: xi_from.form })
    }

    pub fn count(&self, pred: impl Fn(&Decision) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.decision())).count()
    }
}

/// Reads the optimal branch at each node of a converged solve. Ties go to
/// the continuous branch, then to the minimizer's impulse.
pub fn extract_policy(report: &SolveReport, problem: &ProblemSpec, params: &StepParams) -> Result<PolicyField> {
    report.ensure_converged()?;
    let field = &report.field;
    let grid = field.grid().clone();
    if *params.grid != *grid {
        return Err(Error::GridMismatch);
    }
    let form = report.form;
    let mut eval = PointEval::new(field, problem, params);
    let mut x = vec![0.0; grid.dim()];
    let mut nodes = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.node_into(i, &mut x);
        let b = eval.branches(&x, form.hamiltonian);
        let v = form.combine(b.s, b.m, b.n);
        let node = if v == b.s {
            NodePolicy::continuous(b.s_arg)
        } else if v == b.n {
            NodePolicy { control: b.s_arg, xi: None, eta: Some(b.n_arg) }
        } else {
            NodePolicy { control: b.s_arg, xi: Some(b.m_arg), eta: None }
        };
        nodes.push(node);
    }
    PolicyField::new(grid, nodes, form, problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Completed,
    /// The state left the box by more than one cell; the record stops there.
    Escaped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Flow,
    Xi,
    Eta,
}

impl Event {
    /// CSV flag: 0 flow, 1 xi impulse, 2 eta impulse.
    pub fn flag(self) -> u8 {
        match self {
            Event::Flow => 0,
            Event::Xi => 1,
            Event::Eta => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    /// What produced this state.
    pub event: Event,
    pub running_payoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpulseEvent {
    pub t: f64,
    pub player: Player,
    pub action: usize,
    /// Undiscounted cost, evaluated at the pre-jump state.
    pub cost: f64,
}

/// One applied decision, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Impulse { player: Player, action: usize },
    Flow(ControlPair),
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub states: Vec<TrajectoryPoint>,
    pub impulses: Vec<ImpulseEvent>,
    pub steps: Vec<Step>,
    /// Rectangle-rule value of the discounted running gain.
    pub integral: f64,
    pub payoff: f64,
    /// `e^{-lambda T} |f|_inf / lambda`.
    pub truncation_error_bound: f64,
    pub status: SimStatus,
    pub horizon: f64,
    pub h: f64,
    pub discount: f64,
}

impl TrajectoryRecord {
    /// No time stamp carries impulses of both players.
    pub fn priority_ok(&self) -> bool {
        self.impulses.windows(2).all(|w| w[0].t != w[1].t || w[0].player == w[1].player)
    }

    /// Impulse times are non-decreasing.
    pub fn times_ordered(&self) -> bool {
        self.impulses.windows(2).all(|w| w[0].t <= w[1].t)
    }

    pub fn impulses_of(&self, player: Player) -> impl Iterator<Item = &ImpulseEvent> {
        self.impulses.iter().filter(move |e| e.player == player)
    }

    /// `-sum c e^{-lambda tau} + sum chi e^{-lambda rho}` from the impulse list.
    pub fn impulse_term(&self) -> f64 {
        let mut total = 0.0;
        for e in &self.impulses {
            let d = (-self.discount * e.t).exp();
            match e.player {
                Player::Xi => total -= e.cost * d,
                Player::Eta => total += e.cost * d,
            }
        }
        total
    }

    /// Payoff rebuilt term by term from the recorded states and steps.
    pub fn recompute_payoff(&self, problem: &ProblemSpec) -> f64 {
        let mut integral = 0.0;
        let mut state = 0;
        for step in &self.steps {
            match step {
                Step::Impulse { .. } => state += 1,
                Step::Flow(pair) => {
                    let p = &self.states[state];
                    integral += self.h * problem.gain_at(&p.x, *pair) * (-self.discount * p.t).exp();
                    state += 1;
                }
            }
        }
        integral + self.impulse_term()
    }

    pub fn to_csv(&self) -> String {
        let dim = self.states.first().map_or(0, |p| p.x.len());
        let mut out = String::from("t");
        for k in 0..dim {
            let _ = write!(out, ",x{k}");
        }
        out.push_str(",event,running_payoff\n");
        for p in &self.states {
            let _ = write!(out, "{:.16e}", p.t);
            for v in &p.x {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{},{:.16e}", p.event.flag(), p.running_payoff);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "payoff": self.payoff,
            "integral": self.integral,
            "impulse_term": self.impulse_term(),
            "impulses": self.impulses,
            "truncation_error_bound": self.truncation_error_bound,
            "status": self.status,
            "horizon": self.horizon,
            "h": self.h,
            "x0": self.states.first().map(|p| p.x.clone()),
            "final_state": self.states.last().map(|p| p.x.clone()),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub max_consecutive_impulses: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { max_consecutive_impulses: DEFAULT_MAX_CONSECUTIVE_IMPULSES }
    }
}

fn step_count(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::HorizonNotMultiple { horizon, h });
    }
    let n = (horizon / h).round();
    if (n * h - horizon).abs() > 1e-9 * horizon.max(h) {
        return Err(Error::HorizonNotMultiple { horizon, h });
    }
    Ok(n as usize)
}

struct Recorder<'a> {
    problem: &'a ProblemSpec,
    record: TrajectoryRecord,
    y: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a ProblemSpec, x0: &[f64], horizon: f64, h: f64, tail_bound: f64) -> Self {
        let lambda = problem.discount();
        let record = TrajectoryRecord {
            states: vec![TrajectoryPoint { t: 0.0, x: x0.to_vec(), event: Event::Flow, running_payoff: 0.0 }],
            impulses: Vec::new(),
            steps: Vec::new(),
            integral: 0.0,
            payoff: 0.0,
            truncation_error_bound: tail_bound,
            status: SimStatus::Completed,
            horizon,
            h,
            discount: lambda,
        };
        Self { problem, record, y: x0.to_vec(), scratch: vec![0.0; x0.len()] }
    }

    fn impulse(&mut self, t: f64, player: Player, action: usize) -> Result<()> {
        let cost = self.problem.cost_at(player, &self.y, action);
        self.problem.jump_into(player, &self.y, action, &mut self.scratch);
        for (y, g) in self.y.iter_mut().zip(&self.scratch) {
            *y += g;
        }
        let d = (-self.record.discount * t).exp();
        let (event, signed) = match player {
            Player::Xi => (Event::Xi, -cost * d),
            Player::Eta => (Event::Eta, cost * d),
        };
        self.record.payoff += signed;
        self.record.impulses.push(ImpulseEvent { t, player, action, cost });
        self.record.steps.push(Step::Impulse { player, action });
        self.push_state(t, event)
    }

    fn flow(&mut self, t: f64, pair: ControlPair) -> Result<()> {
        let h = self.record.h;
        let term = h * self.problem.gain_at(&self.y, pair) * (-self.record.discount * t).exp();
        self.record.integral += term;
        self.record.payoff += term;
        self.problem.drift_into(&self.y, pair, &mut self.scratch);
        for (y, b) in self.y.iter_mut().zip(&self.scratch) {
            *y += h * b;
        }
        self.record.steps.push(Step::Flow(pair));
        self.push_state(t + h, Event::Flow)
    }

    fn push_state(&mut self, t: f64, event: Event) -> Result<()> {
        if self.y.iter().any(|v| !v.is_finite()) || !self.record.payoff.is_finite() {
            return Err(Error::NonFinite(format!("trajectory state at t = {t}")));
        }
        self.record.states.push(TrajectoryPoint {
            t,
            x: self.y.clone(),
            event,
            running_payoff: self.record.payoff,
        });
        Ok(())
    }
}

pub fn simulate(
    problem: &ProblemSpec,
    policy: &PolicyField,
    x0: &[f64],
    horizon: f64,
    h: f64,
) -> Result<TrajectoryRecord> {
    simulate_with(problem, policy, x0, horizon, h, SimOptions::default())
}

/// Explicit Euler simulation under nearest-node feedback.
///
/// At each instant the minimizer acts first if its node demands an
/// impulse; otherwise the maximizer may. Impulses of one player may chain
/// at a single instant up to `max_consecutive_impulses`. A maximizer chain
/// stops as soon as the minimizer starts demanding, leaving the minimizer's
/// response to the next instant, so no time stamp mixes players.
pub fn simulate_with(
    problem: &ProblemSpec,
    policy: &PolicyField,
    x0: &[f64],
    horizon: f64,
    h: f64,
    options: SimOptions,
) -> Result<TrajectoryRecord> {
    let grid = policy.grid().clone();
    if x0.len() != grid.dim() || grid.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: x0.len() });
    }
    if !grid.contains(x0) {
        return Err(Error::InvalidParam { name: "x0".into(), reason: format!("{x0:?} lies outside the grid box") });
    }
    let steps = step_count(horizon, h)?;
    let lambda = problem.discount();
    let tail = (-lambda * horizon).exp() * problem.gain_sup(&grid) / lambda;
    let mut rec = Recorder::new(problem, x0, horizon, h, tail);
    'time: for k in 0..steps {
        let t = k as f64 * h;
        let mut chain = 0;
        let mut acting: Option<Player> = None;
        loop {
            if !grid.within_cells(&rec.y, 1.0) {
                rec.record.status = SimStatus::Escaped;
                break 'time;
            }
            let node = *policy.lookup(&rec.y);
            let next = match (acting, node.eta, node.xi) {
                (None | Some(Player::Eta), Some(e), _) => Some((Player::Eta, e)),
                (None | Some(Player::Xi), None, Some(x)) => Some((Player::Xi, x)),
                _ => None,
            };
            let Some((player, action)) = next else { break };
            chain += 1;
            if chain > options.max_consecutive_impulses {
                return Err(Error::ImpulseLoop { t, limit: options.max_consecutive_impulses });
            }
            acting = Some(player);
            rec.impulse(t, player, action)?;
        }
        let pair = policy.lookup(&rec.y).control;
        rec.flow(t, pair)?;
    }
    if rec.record.status == SimStatus::Completed && !grid.within_cells(&rec.y, 1.0) {
        rec.record.status = SimStatus::Escaped;
    }
    Ok(rec.record)
}

/// Re-applies a recorded decision sequence from another initial state,
/// without consulting any policy.
pub fn replay(problem: &ProblemSpec, record: &TrajectoryRecord, x0: &[f64]) -> Result<TrajectoryRecord> {
    if x0.len() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: x0.len() });
    }
    let mut rec = Recorder::new(problem, x0, record.horizon, record.h, record.truncation_error_bound);
    let mut t = 0.0;
    let mut k = 0usize;
    for step in &record.steps {
        match *step {
            Step::Impulse { player, action } => rec.impulse(t, player, action)?,
            Step::Flow(pair) => {
                rec.flow(t, pair)?;
                k += 1;
                t = k as f64 * record.h;
            }
        }
    }
    rec.record.status = record.status;
    Ok(rec.record)
}
