//! Game instances: dynamics, running gain, jump maps, impulse costs and
//! the sampled control/impulse sets, plus the built-in example problems
//! and the assumption checks run before solving.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `(x, a, b, out)`: state velocity under continuous controls `a`, `b`.
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, a, b)`: running gain of the maximizer.
pub type GainFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// `(x, action, out)`: jump displacement.
pub type JumpFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, action)`: impulse cost.
pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// The two impulse players. `Xi` maximizes and pays `c`; `Eta` minimizes
/// and pays `chi`, and wins simultaneous impulses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Xi,
    Eta,
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Player::Xi => "xi",
            Player::Eta => "eta",
        })
    }
}

/// Finite list of points in `R^dim`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut coords = Vec::with_capacity(dim * points.len());
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("candidate point".into()));
            }
            coords.extend_from_slice(p);
        }
        Ok(Self { dim, coords })
    }

    pub fn scalars(values: &[f64]) -> Result<Self> {
        let pts: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Self::new(1, &pts)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim.max(1))
    }
}

/// Indices into the two continuous control sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ControlPair {
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LipschitzHints {
    pub drift: Option<f64>,
    pub gain: Option<f64>,
    pub jump_xi: Option<f64>,
    pub jump_eta: Option<f64>,
    pub cost_xi: Option<f64>,
    pub cost_eta: Option<f64>,
}

/// A complete game description. Immutable once built; all maps are pure.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    dim: usize,
    drift: DriftFn,
    gain: GainFn,
    jump_xi: JumpFn,
    jump_eta: JumpFn,
    cost_xi: CostFn,
    cost_eta: CostFn,
    ctrl_a: PointSet,
    ctrl_b: PointSet,
    impulse_xi: PointSet,
    impulse_eta: PointSet,
    discount: f64,
    hints: LipschitzHints,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("ctrl_a", &self.ctrl_a.len())
            .field("ctrl_b", &self.ctrl_b.len())
            .field("impulse_xi", &self.impulse_xi.len())
            .field("impulse_eta", &self.impulse_eta.len())
            .field("discount", &self.discount)
            .finish_non_exhaustive()
    }
}

/// Component selector for [`ProblemSpec::evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Drift,
    Gain,
    JumpXi,
    JumpEta,
    CostXi,
    CostEta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arg {
    Controls(ControlPair),
    Action(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Evaluation {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Evaluation::Scalar(v) => Some(*v),
            Evaluation::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Evaluation::Vector(v) => Some(v),
            Evaluation::Scalar(_) => None,
        }
    }
}

pub struct ProblemBuilder {
    name: String,
    dim: usize,
    drift: Option<DriftFn>,
    gain: Option<GainFn>,
    jump_xi: Option<JumpFn>,
    jump_eta: Option<JumpFn>,
    cost_xi: Option<CostFn>,
    cost_eta: Option<CostFn>,
    ctrl_a: Option<PointSet>,
    ctrl_b: Option<PointSet>,
    impulse_xi: Option<PointSet>,
    impulse_eta: Option<PointSet>,
    discount: f64,
    hints: LipschitzHints,
}

impl ProblemBuilder {
    pub fn drift(mut self, f: impl Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn gain(mut self, f: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.gain = Some(Arc::new(f));
        self
    }

    pub fn jump_xi(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump_xi = Some(Arc::new(f));
        self
    }

    pub fn jump_eta(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump_eta = Some(Arc::new(f));
        self
    }

    pub fn cost_xi(mut self, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_xi = Some(Arc::new(f));
        self
    }

    pub fn cost_eta(mut self, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_eta = Some(Arc::new(f));
        self
    }

    pub fn controls(mut self, a: PointSet, b: PointSet) -> Self {
        self.ctrl_a = Some(a);
        self.ctrl_b = Some(b);
        self
    }

    pub fn impulses(mut self, xi: PointSet, eta: PointSet) -> Self {
        self.impulse_xi = Some(xi);
        self.impulse_eta = Some(eta);
        self
    }

    pub fn discount(mut self, lambda: f64) -> Self {
        self.discount = lambda;
        self
    }

    pub fn hints(mut self, hints: LipschitzHints) -> Self {
        self.hints = hints;
        self
    }

    /// Checks structural invariants. Cost positivity depends on the state
    /// region, so it is checked by [`validate_problem`] against a grid.
    pub fn build(self) -> Result<ProblemSpec> {
        fn need<T>(v: Option<T>, what: &str) -> Result<T> {
            v.ok_or_else(|| Error::InvalidProblem(format!("missing {what}")))
        }
        if self.dim == 0 {
            return Err(Error::InvalidProblem("state dimension must be positive".into()));
        }
        if !(self.discount > 0.0) || !self.discount.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "discount must be positive, got {}",
                self.discount
            )));
        }
        let ctrl_a = need(self.ctrl_a, "control set A")?;
        let ctrl_b = need(self.ctrl_b, "control set B")?;
        let impulse_xi = need(self.impulse_xi, "impulse set for xi")?;
        let impulse_eta = need(self.impulse_eta, "impulse set for eta")?;
        for (set, what) in [
            (&ctrl_a, "control set A"),
            (&ctrl_b, "control set B"),
            (&impulse_xi, "impulse set for xi"),
            (&impulse_eta, "impulse set for eta"),
        ] {
            if set.is_empty() {
                return Err(Error::InvalidProblem(format!("{what} is empty")));
            }
        }
        Ok(ProblemSpec {
            name: self.name,
            dim: self.dim,
            drift: need(self.drift, "drift")?,
            gain: need(self.gain, "gain")?,
            jump_xi: need(self.jump_xi, "jump map for xi")?,
            jump_eta: need(self.jump_eta, "jump map for eta")?,
            cost_xi: need(self.cost_xi, "cost for xi")?,
            cost_eta: need(self.cost_eta, "cost for eta")?,
            ctrl_a,
            ctrl_b,
            impulse_xi,
            impulse_eta,
            discount: self.discount,
            hints: self.hints,
        })
    }
}

impl ProblemSpec {
    pub fn builder(name: impl Into<String>, dim: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            dim,
            drift: None,
            gain: None,
            jump_xi: None,
            jump_eta: None,
            cost_xi: None,
            cost_eta: None,
            ctrl_a: None,
            ctrl_b: None,
            impulse_xi: None,
            impulse_eta: None,
            discount: 1.0,
            hints: LipschitzHints::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn hints(&self) -> &LipschitzHints {
        &self.hints
    }

    pub fn ctrl_a(&self) -> &PointSet {
        &self.ctrl_a
    }

    pub fn ctrl_b(&self) -> &PointSet {
        &self.ctrl_b
    }

    pub fn impulse_set(&self, player: Player) -> &PointSet {
        match player {
            Player::Xi => &self.impulse_xi,
            Player::Eta => &self.impulse_eta,
        }
    }

    /// All control pairs in enumeration order (`a` outer, `b` inner).
    pub fn control_pairs(&self) -> impl Iterator<Item = ControlPair> + '_ {
        let nb = self.ctrl_b.len();
        (0..self.ctrl_a.len()).flat_map(move |a| (0..nb).map(move |b| ControlPair { a, b }))
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], pair: ControlPair, out: &mut [f64]) {
        (self.drift)(x, self.ctrl_a.get(pair.a), self.ctrl_b.get(pair.b), out)
    }

    #[inline]
    pub fn gain_at(&self, x: &[f64], pair: ControlPair) -> f64 {
        (self.gain)(x, self.ctrl_a.get(pair.a), self.ctrl_b.get(pair.b))
    }

    #[inline]
    pub fn jump_into(&self, player: Player, x: &[f64], action: usize, out: &mut [f64]) {
        match player {
            Player::Xi => (self.jump_xi)(x, self.impulse_xi.get(action), out),
            Player::Eta => (self.jump_eta)(x, self.impulse_eta.get(action), out),
        }
    }

    #[inline]
    pub fn cost_at(&self, player: Player, x: &[f64], action: usize) -> f64 {
        match player {
            Player::Xi => (self.cost_xi)(x, self.impulse_xi.get(action)),
            Player::Eta => (self.cost_eta)(x, self.impulse_eta.get(action)),
        }
    }

    /// Checked evaluation of one component of the game.
    pub fn evaluate(&self, component: Component, x: &[f64], arg: Arg) -> Result<Evaluation> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state".into()));
        }
        let check_pair = |arg: Arg| -> Result<ControlPair> {
            match arg {
                Arg::Controls(p) => {
                    if p.a >= self.ctrl_a.len() {
                        return Err(Error::IndexOutOfRange { what: "control a", index: p.a, len: self.ctrl_a.len() });
                    }
                    if p.b >= self.ctrl_b.len() {
                        return Err(Error::IndexOutOfRange { what: "control b", index: p.b, len: self.ctrl_b.len() });
                    }
                    Ok(p)
                }
                Arg::Action(_) => Err(Error::InvalidParam {
                    name: "arg".into(),
                    reason: "expected a control pair".into(),
                }),
            }
        };
        let check_action = |arg: Arg, player: Player| -> Result<usize> {
            match arg {
                Arg::Action(i) => {
                    let len = self.impulse_set(player).len();
                    if i >= len {
                        return Err(Error::IndexOutOfRange { what: "impulse action", index: i, len });
                    }
                    Ok(i)
                }
                Arg::Controls(_) => Err(Error::InvalidParam {
                    name: "arg".into(),
                    reason: "expected an impulse action index".into(),
                }),
            }
        };
        let out = match component {
            Component::Drift => {
                let p = check_pair(arg)?;
                let mut v = vec![0.0; self.dim];
                self.drift_into(x, p, &mut v);
                Evaluation::Vector(v)
            }
            Component::Gain => Evaluation::Scalar(self.gain_at(x, check_pair(arg)?)),
            Component::JumpXi | Component::JumpEta => {
                let player = if component == Component::JumpXi { Player::Xi } else { Player::Eta };
                let i = check_action(arg, player)?;
                let mut v = vec![0.0; self.dim];
                self.jump_into(player, x, i, &mut v);
                Evaluation::Vector(v)
            }
            Component::CostXi => Evaluation::Scalar(self.cost_at(Player::Xi, x, check_action(arg, Player::Xi)?)),
            Component::CostEta => Evaluation::Scalar(self.cost_at(Player::Eta, x, check_action(arg, Player::Eta)?)),
        };
        let finite = match &out {
            Evaluation::Scalar(v) => v.is_finite(),
            Evaluation::Vector(v) => v.iter().all(|c| c.is_finite()),
        };
        if !finite {
            return Err(Error::NonFinite(format!("{component:?} evaluation")));
        }
        Ok(out)
    }

    /// Same dynamics and jump maps, with gain and both costs multiplied by `mu`.
    pub fn scaled_payoff(&self, mu: f64) -> Result<ProblemSpec> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParam { name: "mu".into(), reason: format!("must be positive, got {mu}") });
        }
        let mut out = self.clone();
        let gain = self.gain.clone();
        out.gain = Arc::new(move |x, a, b| mu * gain(x, a, b));
        let c = self.cost_xi.clone();
        out.cost_xi = Arc::new(move |x, a| mu * c(x, a));
        let chi = self.cost_eta.clone();
        out.cost_eta = Arc::new(move |x, a| mu * chi(x, a));
        out.name = format!("{}*{mu}", self.name);
        if let Some(g) = out.hints.gain.as_mut() {
            *g *= mu;
        }
        if let Some(g) = out.hints.cost_xi.as_mut() {
            *g *= mu;
        }
        if let Some(g) = out.hints.cost_eta.as_mut() {
            *g *= mu;
        }
        Ok(out)
    }

    /// `max |f|` over grid nodes and control pairs.
    pub fn gain_sup(&self, grid: &Grid) -> f64 {
        let mut x = vec![0.0; self.dim];
        let mut best = 0.0f64;
        for i in 0..grid.len() {
            grid.node_into(i, &mut x);
            for p in self.control_pairs() {
                best = best.max(self.gain_at(&x, p).abs());
            }
        }
        best
    }

    /// `max |b|` (Euclidean) over grid nodes and control pairs.
    pub fn drift_sup(&self, grid: &Grid) -> f64 {
        let mut x = vec![0.0; self.dim];
        let mut v = vec![0.0; self.dim];
        let mut best = 0.0f64;
        for i in 0..grid.len() {
            grid.node_into(i, &mut x);
            for p in self.control_pairs() {
                self.drift_into(&x, p, &mut v);
                best = best.max(norm(&v));
            }
        }
        best
    }

    /// Largest impulse cost of either player over grid nodes and candidates.
    pub fn max_impulse_cost(&self, grid: &Grid) -> f64 {
        let mut x = vec![0.0; self.dim];
        let mut best = 0.0f64;
        for i in 0..grid.len() {
            grid.node_into(i, &mut x);
            for player in [Player::Xi, Player::Eta] {
                for k in 0..self.impulse_set(player).len() {
                    best = best.max(self.cost_at(player, &x, k));
                }
            }
        }
        best
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Scalar parameters for the built-in problems, keyed by name.
pub type Params = BTreeMap<String, f64>;

struct ParamReader<'a> {
    problem: &'a str,
    params: BTreeMap<String, f64>,
    allowed: &'a [&'a str],
}

impl<'a> ParamReader<'a> {
    fn new(problem: &'a str, raw: &Params, allowed: &'a [&'a str]) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (k, &v) in raw {
            let key = match k.as_str() {
                "λ" => "lambda",
                "κ" => "kappa",
                other => other,
            };
            if !allowed.contains(&key) {
                return Err(Error::InvalidParam {
                    name: k.clone(),
                    reason: format!("not a parameter of `{problem}` (expected one of {})", allowed.join(", ")),
                });
            }
            if !v.is_finite() {
                return Err(Error::InvalidParam { name: k.clone(), reason: "must be finite".into() });
            }
            if params.insert(key.to_string(), v).is_some() {
                return Err(Error::InvalidParam { name: k.clone(), reason: "given twice".into() });
            }
        }
        Ok(Self { problem, params, allowed })
    }

    fn get(&self, name: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&name), "{} reads undeclared {name}", self.problem);
        self.params.get(name).copied().unwrap_or(default)
    }

    fn positive(&self, name: &str, default: f64) -> Result<f64> {
        let v = self.get(name, default);
        if v > 0.0 {
            Ok(v)
        } else {
            let reason = if name.starts_with("kappa") {
                format!("impulse costs must be strictly positive (got {v})")
            } else {
                format!("must be strictly positive (got {v})")
            };
            Err(Error::InvalidParam { name: name.into(), reason })
        }
    }

    fn count(&self, name: &str, default: usize, min: usize) -> Result<usize> {
        let v = self.get(name, default as f64);
        if v.fract() != 0.0 || v < min as f64 || v > 1e7 {
            return Err(Error::InvalidParam {
                name: name.into(),
                reason: format!("must be an integer in [{min}, 1e7], got {v}"),
            });
        }
        Ok(v as usize)
    }
}

/// Names accepted by [`make_builtin`].
pub const BUILTINS: [&str; 4] = ["constant", "linear1d", "impulse1d", "portfolio"];

/// Builds one of the example problems.
///
/// * `constant`: `b = 0`, `f = f0`, jumps `g(x, a) = a` with candidates
///   `±jump` along each axis, both costs `kappa`. Params `f0, lambda, kappa,
///   jump, dim`.
/// * `linear1d`: `b = a + b` with `A = B = {-1, 0, 1} * scale`, `f = x^2`,
///   jumps `±jump` at cost `kappa`. Params `lambda, scale, kappa, jump`.
/// * `impulse1d`: `b = 0`, `f = x^2`, `eta`-jumps `g(x, e) = e` over a
///   uniform grid of `n_eta` points on `[-W, W]` at cost `kappa`; the `xi`
///   player has a single jump priced at `xi_cost`. Params `lambda, kappa, W,
///   n_eta, xi_cost`.
/// * `portfolio`: state `(exposure, market factor)`, affine drift
///   `(-alpha e + m + u, -alpha m + s)`, holding gain `e^2 + rho m^2`, market
///   shocks on the factor and investor rebalancing of the exposure, each at
///   a fixed plus proportional cost. Params `lambda, alpha, sigma, u, rho,
///   W, n_jump, kappa_xi, kappa_eta, prop_xi, prop_eta`.
pub fn make_builtin(name: &str, params: &Params) -> Result<ProblemSpec> {
    match name {
        "constant" => constant(params),
        "linear1d" => linear1d(params),
        "impulse1d" => impulse1d(params),
        "portfolio" => portfolio(params),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

fn identity_jump(_x: &[f64], a: &[f64], out: &mut [f64]) {
    out.copy_from_slice(a);
}

fn constant(raw: &Params) -> Result<ProblemSpec> {
    let p = ParamReader::new("constant", raw, &["f0", "lambda", "kappa", "jump", "dim"])?;
    let f0 = p.get("f0", 2.0);
    let lambda = p.positive("lambda", 1.0)?;
    let kappa = p.positive("kappa", 1.0)?;
    let jump = p.positive("jump", 0.5)?;
    let dim = p.count("dim", 1, 1)?;
    if dim > crate::grid::MAX_DIM {
        return Err(Error::InvalidParam { name: "dim".into(), reason: format!("at most {}", crate::grid::MAX_DIM) });
    }
    let mut jumps = Vec::new();
    for axis in 0..dim {
        for s in [-jump, jump] {
            let mut e = vec![0.0; dim];
            e[axis] = s;
            jumps.push(e);
        }
    }
    let origin = PointSet::new(1, &[vec![0.0]])?;
    let set = PointSet::new(dim, &jumps)?;
    ProblemSpec::builder("constant", dim)
        .drift(|_, _, _, out| out.fill(0.0))
        .gain(move |_, _, _| f0)
        .jump_xi(identity_jump)
        .jump_eta(identity_jump)
        .cost_xi(move |_, _| kappa)
        .cost_eta(move |_, _| kappa)
        .controls(origin.clone(), origin)
        .impulses(set.clone(), set)
        .discount(lambda)
        .hints(LipschitzHints {
            drift: Some(0.0),
            gain: Some(0.0),
            jump_xi: Some(0.0),
            jump_eta: Some(0.0),
            cost_xi: Some(0.0),
            cost_eta: Some(0.0),
        })
        .build()
}

fn linear1d(raw: &Params) -> Result<ProblemSpec> {
    let p = ParamReader::new("linear1d", raw, &["lambda", "scale", "kappa", "jump"])?;
    let lambda = p.positive("lambda", 1.0)?;
    let scale = p.positive("scale", 1.0)?;
    let kappa = p.positive("kappa", 1.0)?;
    let jump = p.positive("jump", 0.5)?;
    let ctrl = PointSet::scalars(&[-scale, 0.0, scale])?;
    let jumps = PointSet::scalars(&[-jump, jump])?;
    ProblemSpec::builder("linear1d", 1)
        .drift(|_, a, b, out| out[0] = a[0] + b[0])
        .gain(|x, _, _| x[0] * x[0])
        .jump_xi(identity_jump)
        .jump_eta(identity_jump)
        .cost_xi(move |_, _| kappa)
        .cost_eta(move |_, _| kappa)
        .controls(ctrl.clone(), ctrl)
        .impulses(jumps.clone(), jumps)
        .discount(lambda)
        .hints(LipschitzHints {
            drift: Some(0.0),
            gain: None,
            jump_xi: Some(0.0),
            jump_eta: Some(0.0),
            cost_xi: Some(0.0),
            cost_eta: Some(0.0),
        })
        .build()
}

fn impulse1d(raw: &Params) -> Result<ProblemSpec> {
    let p = ParamReader::new("impulse1d", raw, &["lambda", "kappa", "W", "n_eta", "xi_cost"])?;
    let lambda = p.positive("lambda", 1.0)?;
    let kappa = p.positive("kappa", 4.0)?;
    let width = p.positive("W", 4.0)?;
    let n_eta = p.count("n_eta", 161, 2)?;
    let xi_cost = p.positive("xi_cost", 1e6)?;
    let step = 2.0 * width / (n_eta - 1) as f64;
    let etas: Vec<f64> = (0..n_eta).map(|i| -width + i as f64 * step).collect();
    let single = PointSet::scalars(&[0.0])?;
    ProblemSpec::builder("impulse1d", 1)
        .drift(|_, _, _, out| out[0] = 0.0)
        .gain(|x, _, _| x[0] * x[0])
        .jump_xi(identity_jump)
        .jump_eta(identity_jump)
        .cost_xi(move |_, _| xi_cost)
        .cost_eta(move |_, _| kappa)
        .controls(single.clone(), single)
        .impulses(PointSet::scalars(&[1.0])?, PointSet::scalars(&etas)?)
        .discount(lambda)
        .hints(LipschitzHints {
            drift: Some(0.0),
            gain: None,
            jump_xi: Some(0.0),
            jump_eta: Some(0.0),
            cost_xi: Some(0.0),
            cost_eta: Some(0.0),
        })
        .build()
}

fn portfolio(raw: &Params) -> Result<ProblemSpec> {
    let p = ParamReader::new(
        "portfolio",
        raw,
        &[
            "lambda", "alpha", "sigma", "u", "rho", "W", "n_jump", "kappa_xi", "kappa_eta", "prop_xi", "prop_eta",
        ],
    )?;
    let lambda = p.positive("lambda", 1.0)?;
    let alpha = p.get("alpha", 0.5);
    let sigma = p.positive("sigma", 0.5)?;
    let u = p.positive("u", 0.5)?;
    let rho = p.positive("rho", 0.5)?;
    let width = p.positive("W", 1.0)?;
    let n_jump = p.count("n_jump", 4, 1)?;
    let kappa_xi = p.positive("kappa_xi", 1.0)?;
    let kappa_eta = p.positive("kappa_eta", 0.2)?;
    let prop_xi = p.get("prop_xi", 0.1);
    let prop_eta = p.get("prop_eta", 0.1);
    if prop_xi < 0.0 || prop_eta < 0.0 {
        return Err(Error::InvalidParam { name: "prop_xi/prop_eta".into(), reason: "must be non-negative".into() });
    }
    // Market shocks move the factor, investor rebalancing moves the exposure;
    // magnitudes k*W/n_jump for k = 1..=n_jump in both directions.
    let mags: Vec<f64> = (1..=n_jump).map(|k| k as f64 * width / n_jump as f64).collect();
    let mut shocks = Vec::new();
    let mut trades = Vec::new();
    for &m in &mags {
        for s in [-m, m] {
            shocks.push(vec![0.0, s]);
            trades.push(vec![s, 0.0]);
        }
    }
    ProblemSpec::builder("portfolio", 2)
        .drift(move |x, a, b, out| {
            out[0] = -alpha * x[0] + x[1] + b[0];
            out[1] = -alpha * x[1] + a[0];
        })
        .gain(move |x, _, _| x[0] * x[0] + rho * x[1] * x[1])
        .jump_xi(identity_jump)
        .jump_eta(identity_jump)
        .cost_xi(move |_, a| kappa_xi + prop_xi * (a[0].abs() + a[1].abs()))
        .cost_eta(move |_, a| kappa_eta + prop_eta * (a[0].abs() + a[1].abs()))
        .controls(PointSet::scalars(&[-sigma, 0.0, sigma])?, PointSet::scalars(&[-u, 0.0, u])?)
        .impulses(PointSet::new(2, &shocks)?, PointSet::new(2, &trades)?)
        .discount(lambda)
        .hints(LipschitzHints {
            drift: Some((alpha * alpha + 1.0).sqrt() + alpha.abs()),
            gain: None,
            jump_xi: Some(0.0),
            jump_eta: Some(0.0),
            cost_xi: Some(0.0),
            cost_eta: Some(0.0),
        })
        .build()
}

/// One empirical Lipschitz estimate, with the declared hint if any.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzCheck {
    pub component: &'static str,
    pub estimate: f64,
    pub hint: Option<f64>,
    /// Estimate exceeds the hint by more than rounding.
    pub exceeds_hint: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub min_cost_xi: f64,
    pub min_cost_eta: f64,
    pub min_impulse_cost: f64,
    pub positivity_ok: bool,
    pub lipschitz: Vec<LipschitzCheck>,
    /// Fraction of jump destinations `x + g(x, a)` outside the box.
    pub clamped_fraction: f64,
    pub subadditivity_violations: usize,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_fatal(&self) -> bool {
        !self.positivity_ok
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_fatal() {
            Err(Error::Validation(format!(
                "impulse costs must be strictly positive on the grid (min xi cost {}, min eta cost {})",
                self.min_cost_xi, self.min_cost_eta
            )))
        } else {
            Ok(self)
        }
    }
}

/// Grid nodes used for pairwise and triple checks (at most `cap`, evenly spread).
fn sample_nodes(grid: &Grid, cap: usize) -> Vec<usize> {
    let n = grid.len();
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|k| k * (n - 1) / (cap - 1)).collect()
}

/// Assumption checks of a problem on a bounded grid. Never fails; a failed
/// positivity check is reported as fatal.
pub fn validate_problem(problem: &ProblemSpec, grid: &Grid) -> ValidationReport {
    let dim = problem.dim();
    let mut warnings = Vec::new();
    if grid.dim() != dim {
        warnings.push(format!("grid dimension {} differs from problem dimension {dim}", grid.dim()));
        return ValidationReport {
            min_cost_xi: f64::NAN,
            min_cost_eta: f64::NAN,
            min_impulse_cost: f64::NAN,
            positivity_ok: false,
            lipschitz: Vec::new(),
            clamped_fraction: 0.0,
            subadditivity_violations: 0,
            warnings,
        };
    }
    let mut x = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut dest = vec![0.0; dim];
    let mut min_cost = [f64::INFINITY; 2];
    let mut outside = 0usize;
    let mut total = 0usize;
    let mut non_finite = false;
    for i in 0..grid.len() {
        grid.node_into(i, &mut x);
        for (slot, player) in [Player::Xi, Player::Eta].into_iter().enumerate() {
            for k in 0..problem.impulse_set(player).len() {
                let c = problem.cost_at(player, &x, k);
                if !c.is_finite() {
                    non_finite = true;
                }
                min_cost[slot] = min_cost[slot].min(c);
                problem.jump_into(player, &x, k, &mut g);
                for a in 0..dim {
                    dest[a] = x[a] + g[a];
                }
                total += 1;
                if !grid.contains(&dest) {
                    outside += 1;
                }
            }
        }
    }
    // NaN costs compare false and so fail positivity as well.
    let positivity_ok = !non_finite && min_cost[0] > 0.0 && min_cost[1] > 0.0;
    if non_finite {
        warnings.push("non-finite impulse cost on the grid".into());
    }
    let clamped_fraction = if total == 0 { 0.0 } else { outside as f64 / total as f64 };
    if clamped_fraction > 0.0 {
        warnings.push(format!(
            "{:.2}% of jump destinations leave the box and will be clamped",
            100.0 * clamped_fraction
        ));
    }

    let lipschitz = lipschitz_estimates(problem, grid);
    for check in &lipschitz {
        if check.exceeds_hint {
            warnings.push(format!(
                "{} Lipschitz estimate {:.4e} exceeds hint {:.4e}",
                check.component,
                check.estimate,
                check.hint.unwrap_or(f64::NAN)
            ));
        }
    }

    let subadditivity_violations = subadditivity_violations(problem, grid);
    if subadditivity_violations > 0 {
        warnings.push(format!(
            "{subadditivity_violations} sampled triples violate cost subadditivity"
        ));
    }

    ValidationReport {
        min_cost_xi: min_cost[0],
        min_cost_eta: min_cost[1],
        min_impulse_cost: min_cost[0].min(min_cost[1]),
        positivity_ok,
        lipschitz,
        clamped_fraction,
        subadditivity_violations,
        warnings,
    }
}

fn lipschitz_estimates(problem: &ProblemSpec, grid: &Grid) -> Vec<LipschitzCheck> {
    let dim = problem.dim();
    let hints = problem.hints();
    let mut est = [0.0f64; 6];
    let mut x = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    let mut vx = vec![0.0; dim];
    let mut vy = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    for flat in sample_nodes(grid, 4096) {
        grid.multi_index(flat, &mut idx);
        grid.node_into(flat, &mut x);
        for axis in 0..dim {
            if idx[axis] + 1 >= grid.nodes_per_axis()[axis] {
                continue;
            }
            grid.node_into(flat + grid.strides()[axis], &mut y);
            let d = dist(&x, &y);
            for p in problem.control_pairs() {
                problem.drift_into(&x, p, &mut vx);
                problem.drift_into(&y, p, &mut vy);
                est[0] = est[0].max(dist(&vx, &vy) / d);
                est[1] = est[1].max((problem.gain_at(&x, p) - problem.gain_at(&y, p)).abs() / d);
            }
            for (slot, player) in [(2, Player::Xi), (3, Player::Eta)] {
                for k in 0..problem.impulse_set(player).len() {
                    problem.jump_into(player, &x, k, &mut vx);
                    problem.jump_into(player, &y, k, &mut vy);
                    est[slot] = est[slot].max(dist(&vx, &vy) / d);
                    let dc = (problem.cost_at(player, &x, k) - problem.cost_at(player, &y, k)).abs() / d;
                    est[slot + 2] = est[slot + 2].max(dc);
                }
            }
        }
    }
    let names = ["drift", "gain", "jump_xi", "jump_eta", "cost_xi", "cost_eta"];
    let hint_of = [hints.drift, hints.gain, hints.jump_xi, hints.jump_eta, hints.cost_xi, hints.cost_eta];
    names
        .iter()
        .zip(est)
        .zip(hint_of)
        .map(|((&component, estimate), hint)| LipschitzCheck {
            component,
            estimate,
            hint,
            exceeds_hint: hint.is_some_and(|h| estimate > h * (1.0 + 1e-9) + 1e-9),
        })
        .collect()
}

/// Counts `(x, a1, a2)` with `a1 + a2` in the candidate set and
/// `cost(x, a1 + a2) > cost(x, a1) + cost(x, a2)`.
fn subadditivity_violations(problem: &ProblemSpec, grid: &Grid) -> usize {
    let dim = problem.dim();
    let mut x = vec![0.0; dim];
    let mut sum = vec![0.0; problem.impulse_set(Player::Xi).dim().max(problem.impulse_set(Player::Eta).dim())];
    let mut violations = 0;
    for player in [Player::Xi, Player::Eta] {
        let set = problem.impulse_set(player);
        // Triples grow quadratically in the candidate count; thin large sets.
        let stride = (set.len() / 48).max(1);
        let picks: Vec<usize> = (0..set.len()).step_by(stride).collect();
        for flat in sample_nodes(grid, 16) {
            grid.node_into(flat, &mut x);
            for &i in &picks {
                for &j in &picks {
                    let (a1, a2) = (set.get(i), set.get(j));
                    for k in 0..set.dim() {
                        sum[k] = a1[k] + a2[k];
                    }
                    let found = (0..set.len()).find(|&k| {
                        set.get(k).iter().zip(&sum).all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + v.abs()))
                    });
                    if let Some(k) = found {
                        let lhs = problem.cost_at(player, &x, k);
                        let rhs = problem.cost_at(player, &x, i) + problem.cost_at(player, &x, j);
                        if lhs > rhs + 1e-12 * rhs.abs().max(1.0) {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    const ANY: ControlPair = ControlPair { a: 0, b: 0 };

    #[test]
    fn constant_gain_is_f0_everywhere() {
        let p = make_builtin("constant", &params(&[("f0", 2.0), ("λ", 1.0), ("κ", 1.0)])).unwrap();
        for x in [-3.0, 0.0, 0.7, 10.0] {
            let v = p.evaluate(Component::Gain, &[x], Arg::Controls(ANY)).unwrap();
            assert_eq!(v, Evaluation::Scalar(2.0));
        }
    }

    #[test]
    fn impulse1d_costs_and_jumps() {
        let p = make_builtin("impulse1d", &params(&[("lambda", 1.0), ("kappa", 4.0), ("W", 4.0)])).unwrap();
        let etas = p.impulse_set(Player::Eta);
        let minus3 = (0..etas.len()).find(|&i| etas.get(i)[0] == -3.0).expect("-3 is a candidate");
        let g = p.evaluate(Component::JumpEta, &[3.0], Arg::Action(minus3)).unwrap();
        assert_eq!(g.vector().unwrap(), &[-3.0]);
        for i in [0, minus3, etas.len() - 1] {
            let c = p.evaluate(Component::CostEta, &[3.0], Arg::Action(i)).unwrap();
            assert_eq!(c.scalar(), Some(4.0));
        }
    }

    #[test]
    fn linear1d_opposite_controls_cancel() {
        let p = make_builtin("linear1d", &params(&[("lambda", 1.0), ("scale", 1.0)])).unwrap();
        // A = B = {-1, 0, 1}: index 2 is +1, index 0 is -1.
        let v = p.evaluate(Component::Drift, &[0.5], Arg::Controls(ControlPair { a: 2, b: 0 })).unwrap();
        assert_eq!(v.vector().unwrap(), &[0.0]);
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(make_builtin("nope", &Params::new()), Err(Error::UnknownProblem(_))));
        assert!(matches!(
            make_builtin("constant", &params(&[("lambda", 0.0)])),
            Err(Error::InvalidParam { .. })
        ));
        assert!(matches!(
            make_builtin("impulse1d", &params(&[("kappa", -1.0)])),
            Err(Error::InvalidParam { .. })
        ));
        assert!(matches!(
            make_builtin("linear1d", &params(&[("bogus", 1.0)])),
            Err(Error::InvalidParam { .. })
        ));
        assert!(matches!(
            make_builtin("impulse1d", &params(&[("n_eta", 2.5)])),
            Err(Error::InvalidParam { .. })
        ));
    }

    #[test]
    fn evaluate_checks_indices() {
        let p = make_builtin("linear1d", &Params::new()).unwrap();
        assert!(matches!(
            p.evaluate(Component::Gain, &[0.0], Arg::Controls(ControlPair { a: 3, b: 0 })),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            p.evaluate(Component::CostXi, &[0.0], Arg::Action(2)),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(p.evaluate(Component::Gain, &[f64::NAN], Arg::Controls(ANY)).is_err());
        assert!(p.evaluate(Component::Gain, &[0.0, 1.0], Arg::Controls(ANY)).is_err());
    }

    #[test]
    fn evaluate_rejects_non_finite_results() {
        let one = PointSet::scalars(&[0.0]).unwrap();
        let p = ProblemSpec::builder("bad", 1)
            .drift(|_, _, _, out| out[0] = f64::INFINITY)
            .gain(|_, _, _| f64::NAN)
            .jump_xi(identity_jump)
            .jump_eta(identity_jump)
            .cost_xi(|_, _| 1.0)
            .cost_eta(|_, _| 1.0)
            .controls(one.clone(), one.clone())
            .impulses(one.clone(), one)
            .build()
            .unwrap();
        assert!(matches!(p.evaluate(Component::Gain, &[0.0], Arg::Controls(ANY)), Err(Error::NonFinite(_))));
        assert!(matches!(p.evaluate(Component::Drift, &[0.0], Arg::Controls(ANY)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn builder_rejects_empty_sets() {
        let empty = PointSet::new(1, &[]).unwrap();
        let one = PointSet::scalars(&[0.0]).unwrap();
        let r = ProblemSpec::builder("e", 1)
            .drift(|_, _, _, out| out[0] = 0.0)
            .gain(|_, _, _| 0.0)
            .jump_xi(identity_jump)
            .jump_eta(identity_jump)
            .cost_xi(|_, _| 1.0)
            .cost_eta(|_, _| 1.0)
            .controls(one.clone(), empty)
            .impulses(one.clone(), one)
            .build();
        assert!(matches!(r, Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn evaluate_is_bitwise_repeatable() {
        let p = make_builtin("portfolio", &Params::new()).unwrap();
        let x = [0.3, -0.7];
        for pair in p.control_pairs() {
            let a = p.evaluate(Component::Drift, &x, Arg::Controls(pair)).unwrap();
            let b = p.evaluate(Component::Drift, &x, Arg::Controls(pair)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn validate_constant_problem() {
        let p = make_builtin("constant", &params(&[("f0", 2.0)])).unwrap();
        let g = Grid::new(&[-1.0], &[1.0], &[11]).unwrap();
        let r = validate_problem(&p, &g);
        assert_eq!(r.min_impulse_cost, 1.0);
        assert!(r.positivity_ok);
        assert!(!r.is_fatal());
        assert_eq!(r.subadditivity_violations, 0);
    }

    #[test]
    fn validate_reports_clamping() {
        let p = make_builtin("impulse1d", &params(&[("W", 4.0)])).unwrap();
        let g = Grid::new(&[-2.0], &[2.0], &[41]).unwrap();
        let r = validate_problem(&p, &g);
        assert!(r.clamped_fraction > 0.0);
        assert!(r.positivity_ok);
    }

    #[test]
    fn zero_cost_is_fatal() {
        let p = make_builtin("constant", &Params::new()).unwrap();
        let one = PointSet::scalars(&[0.0]).unwrap();
        let jumps = PointSet::scalars(&[-0.5, 0.5]).unwrap();
        let free = ProblemSpec::builder("free", 1)
            .drift(|_, _, _, out| out[0] = 0.0)
            .gain(|_, _, _| 2.0)
            .jump_xi(identity_jump)
            .jump_eta(identity_jump)
            .cost_xi(|_, _| 0.0)
            .cost_eta(|_, _| 0.0)
            .controls(one.clone(), one)
            .impulses(jumps.clone(), jumps)
            .build()
            .unwrap();
        let g = Grid::new(&[-1.0], &[1.0], &[11]).unwrap();
        assert!(validate_problem(&free, &g).is_fatal());
        assert!(validate_problem(&free, &g).into_result().is_err());
        assert!(!validate_problem(&p, &g).is_fatal());
    }

    #[test]
    fn subadditivity_violation_is_detected() {
        let one = PointSet::scalars(&[0.0]).unwrap();
        let jumps = PointSet::scalars(&[0.5, 1.0]).unwrap();
        // Superadditive: c(1.0) = 4 > c(0.5) + c(0.5) = 2.
        let p = ProblemSpec::builder("superadditive", 1)
            .drift(|_, _, _, out| out[0] = 0.0)
            .gain(|_, _, _| 0.0)
            .jump_xi(identity_jump)
            .jump_eta(identity_jump)
            .cost_xi(|_, a| 4.0 * a[0] * a[0])
            .cost_eta(|_, _| 1.0)
            .controls(one.clone(), one)
            .impulses(jumps.clone(), jumps)
            .build()
            .unwrap();
        let g = Grid::new(&[-1.0], &[1.0], &[5]).unwrap();
        let r = validate_problem(&p, &g);
        assert!(r.subadditivity_violations > 0);
        assert!(!r.is_fatal());
    }

    #[test]
    fn lipschitz_estimates_respect_hints_on_builtins() {
        for name in BUILTINS {
            let p = make_builtin(name, &Params::new()).unwrap();
            let g = if p.dim() == 1 {
                Grid::new(&[-3.0], &[3.0], &[61]).unwrap()
            } else {
                Grid::new(&[-1.0, -1.0], &[1.0, 1.0], &[11, 11]).unwrap()
            };
            let r = validate_problem(&p, &g);
            assert!(r.positivity_ok, "{name}");
            for c in &r.lipschitz {
                assert!(!c.exceeds_hint, "{name}: {c:?}");
            }
            assert_eq!(r.subadditivity_violations, 0, "{name}");
        }
    }
}
