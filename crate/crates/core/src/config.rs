//! Run configuration: a single JSON document per run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{Grid, ValueField};
use crate::operators::{QviForm, StepParams};
use crate::problem::{make_builtin, Params, ProblemSpec};
use crate::solver::{Init, SolverParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

/// Time step: a number, or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSpec {
    Auto,
    Value(f64),
}

impl Serialize for StepSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSpec::Auto => s.serialize_str("auto"),
            StepSpec::Value(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for StepSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(h) => Ok(StepSpec::Value(h)),
            Raw::Text(t) if t == "auto" => Ok(StepSpec::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{t}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Zeros,
    Constant(f64),
    FieldCsv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_step")]
    pub h: StepSpec,
    #[serde(default = "default_tol_fix")]
    pub tol_fix: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_init")]
    pub init: InitConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { h: default_step(), tol_fix: default_tol_fix(), max_iters: default_max_iters(), init: default_init() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_sim_h")]
    pub h: f64,
    /// Form whose policy is simulated; defaults to the first listed form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<QviForm>,
    #[serde(default = "default_max_impulses")]
    pub max_consecutive_impulses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_lemma_tol")]
    pub lemma1_tol: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { lemma1_tol: default_lemma_tol(), mu: default_mu() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_gap_tol")]
    pub tolerance: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { tolerance: default_gap_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_forms")]
    pub forms: Vec<QviForm>,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn default_step() -> StepSpec {
    StepSpec::Auto
}
fn default_tol_fix() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    100_000
}
fn default_init() -> InitConfig {
    InitConfig::Zeros
}
fn default_sim_h() -> f64 {
    0.01
}
fn default_max_impulses() -> usize {
    crate::policy::DEFAULT_MAX_CONSECUTIVE_IMPULSES
}
fn default_lemma_tol() -> f64 {
    1e-6
}
fn default_mu() -> f64 {
    0.5
}
fn default_gap_tol() -> f64 {
    5e-2
}
fn default_forms() -> Vec<QviForm> {
    vec![QviForm::L, QviForm::U]
}
fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("at `{path}`: {msg}"))
}

impl RunConfig {
    /// Parses and checks the document. Errors name the offending JSON path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path.is_empty() { "." } else { &path }, e.into_inner())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let InitConfig::FieldCsv(p) = &cfg.solver.init {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.solver.init = InitConfig::FieldCsv(base.join(p));
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.forms.is_empty() {
            return Err(config_err("forms", "at least one form is required"));
        }
        let g = &self.grid;
        if g.lo.len() != g.hi.len() || g.lo.len() != g.nodes.len() {
            return Err(config_err("grid", "lo, hi and nodes must have the same length"));
        }
        if !(self.solver.tol_fix > 0.0) {
            return Err(config_err("solver.tol_fix", "must be > 0"));
        }
        if self.solver.max_iters == 0 {
            return Err(config_err("solver.max_iters", "must be >= 1"));
        }
        if let StepSpec::Value(h) = self.solver.h {
            if !(h > 0.0) || !h.is_finite() {
                return Err(config_err("solver.h", "must be a positive number or \"auto\""));
            }
        }
        if let Some(sim) = &self.simulate {
            if sim.x0.len() != g.lo.len() {
                return Err(config_err("simulate.x0", "length must match the grid dimension"));
            }
            if !(sim.h > 0.0) || !(sim.horizon >= 0.0) {
                return Err(config_err("simulate", "h must be > 0 and horizon >= 0"));
            }
        }
        if !(self.verify.mu > 0.0 && self.verify.mu < 1.0) {
            return Err(config_err("verify.mu", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        make_builtin(&self.problem.name, &self.problem.params)
    }

    pub fn build_grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::new(&self.grid.lo, &self.grid.hi, &self.grid.nodes)?))
    }

    pub fn step(&self, grid: &Arc<Grid>, problem: &ProblemSpec) -> Result<StepParams> {
        match self.solver.h {
            StepSpec::Auto => StepParams::auto(grid.clone(), problem),
            StepSpec::Value(h) => StepParams::new(h, grid.clone(), problem),
        }
    }

    /// Copy with `"auto"` replaced by the step actually used.
    pub fn resolved(&self, step: &StepParams) -> RunConfig {
        let mut out = self.clone();
        out.solver.h = StepSpec::Value(step.h);
        out
    }

    pub fn solver_params(&self, grid: &Arc<Grid>, problem: &ProblemSpec) -> Result<SolverParams> {
        let step = self.step(grid, problem)?;
        let init = match &self.solver.init {
            InitConfig::Zeros => Init::Zeros,
            InitConfig::Constant(k) => Init::Constant(*k),
            InitConfig::FieldCsv(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                Init::Field(ValueField::from_csv(&text, grid.clone())?)
            }
        };
        Ok(SolverParams::new(step, self.solver.tol_fix, self.solver.max_iters)?.with_init(init))
    }
}

/// Parses a JSON object of problem parameters.
pub fn parse_params_json(text: &str) -> Result<Params> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| config_err(&e.path().to_string(), e.into_inner()))
}
