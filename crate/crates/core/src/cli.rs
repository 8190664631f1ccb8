//! The `qvi` command line: solve, simulate, verify and compare pipelines.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::{hjbi_residual, QviForm, StepParams};
use crate::policy::{extract_policy, simulate_with, SimOptions};
use crate::problem::{validate_problem, ProblemSpec, ValidationReport};
use crate::solver::{check_lemma1, isaacs_gap, mu_scaling_gap, solve, value_bound, SolveReport, SolverParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const THREADS_ENV: &str = "QVI_THREADS";

#[derive(Debug, Parser)]
#[command(name = "qvi", version, about = "Grid solver for zero-sum differential games with impulse controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve each configured form; writes field_<form>.csv and report_<form>.json.
    Solve(CommonArgs),
    /// Solve, extract the feedback policy and simulate from `simulate.x0`.
    Simulate(CommonArgs),
    /// Structural checks on each configured form; writes verify.json.
    Verify(CommonArgs),
    /// Isaacs gaps between lower and upper forms; writes compare.json.
    Compare(CommonArgs),
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `outputs` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the sweeps; overrides QVI_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Validation(_)
        | Error::UnknownProblem(_)
        | Error::InvalidParam { .. }
        | Error::InvalidProblem(_)
        | Error::InvalidStep(_)
        | Error::HorizonNotMultiple { .. }
        | Error::DegenerateBox { .. }
        | Error::TooFewNodes { .. }
        | Error::NodeCountOverflow
        | Error::TooManyDimensions(_) => EXIT_VALIDATION,
        _ => EXIT_USAGE,
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Solve(a) => cmd_solve(&Context::load(&a)?),
        Command::Simulate(a) => cmd_simulate(&Context::load(&a)?),
        Command::Verify(a) => cmd_verify(&Context::load(&a)?),
        Command::Compare(a) => cmd_compare(&Context::load(&a)?),
    }
}

struct Context {
    config: RunConfig,
    resolved: Value,
    problem: ProblemSpec,
    grid: Arc<Grid>,
    params: SolverParams,
    validation: ValidationReport,
    out: PathBuf,
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        _ => Ok(None),
    }
}

impl Context {
    fn load(args: &CommonArgs) -> Result<Self> {
        let config = RunConfig::from_path(&args.config)?;
        let problem = config.build_problem()?;
        let grid = config.build_grid()?;
        let validation = validate_problem(&problem, &grid).into_result()?;
        for w in &validation.warnings {
            eprintln!("warning: {w}");
        }
        let mut params = config.solver_params(&grid, &problem)?;
        let threads = match args.threads {
            Some(n) => Some(n),
            None => threads_from_env()?,
        };
        if let Some(n) = threads {
            if n == 0 {
                return Err(Error::Config("thread count must be >= 1".into()));
            }
            params = params.with_threads(n);
        }
        let resolved = serde_json::to_value(config.resolved(&params.step))?;
        let out = args.out.clone().unwrap_or_else(|| config.outputs.clone());
        fs::create_dir_all(&out)?;
        Ok(Self { config, resolved, problem, grid, params, validation, out })
    }

    fn solve(&self, form: QviForm) -> Result<SolveReport> {
        let report = solve(&self.problem, self.grid.clone(), form, &self.params)?;
        if !report.converged {
            eprintln!(
                "warning: form {form} not converged after {} sweeps (delta {:e})",
                report.iterations,
                report.final_delta()
            );
        }
        Ok(report)
    }

    fn step(&self) -> &StepParams {
        &self.params.step
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// The JSON form of a solve report.
pub fn report_json(report: &SolveReport, field_csv_path: &Path, config: &Value) -> Value {
    json!({
        "form": report.form,
        "iterations": report.iterations,
        "converged": report.converged,
        "final_delta": report.final_delta(),
        "residual_history": report.residual_history,
        "field_csv_path": field_csv_path.display().to_string(),
        "wall_time_s": report.wall_time,
        "h": report.h,
        "tol_fix": report.tol_fix,
        "config": config,
    })
}

fn cmd_solve(ctx: &Context) -> Result<()> {
    for &form in &ctx.config.forms {
        let report = ctx.solve(form)?;
        let csv = ctx.out.join(format!("field_{form}.csv"));
        fs::write(&csv, report.field.to_csv())?;
        write_json(&ctx.out.join(format!("report_{form}.json")), &report_json(&report, &csv, &ctx.resolved))?;
        println!(
            "{form}: {} sweeps, converged={}, final delta {:.3e}",
            report.iterations,
            report.converged,
            report.final_delta()
        );
    }
    Ok(())
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let sim = ctx
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("at `simulate`: block required for the simulate command".into()))?;
    let form = sim.form.unwrap_or(ctx.config.forms[0]);
    let report = ctx.solve(form)?;
    let policy = extract_policy(&report, &ctx.problem, ctx.step())?;
    let options = SimOptions { max_consecutive_impulses: sim.max_consecutive_impulses };
    let record = simulate_with(&ctx.problem, &policy, &sim.x0, sim.horizon, sim.h, options)?;
    let field_x0 = report.field.interpolate(&sim.x0)?;
    fs::write(ctx.out.join(format!("trajectory_{form}.csv")), record.to_csv())?;
    let mut summary = record.summary_json();
    summary["form"] = json!(form);
    summary["field_at_x0"] = json!(field_x0);
    summary["payoff_minus_field"] = json!(record.payoff - field_x0);
    summary["config"] = ctx.resolved.clone();
    write_json(&ctx.out.join(format!("simulation_{form}.json")), &summary)?;
    println!(
        "{form}: payoff {:.6} vs field {:.6}, {} impulses, {:?}",
        record.payoff,
        field_x0,
        record.impulses.len(),
        record.status
    );
    Ok(())
}

fn cmd_verify(ctx: &Context) -> Result<()> {
    let bound = value_bound(&ctx.problem, &ctx.grid);
    let tol = ctx.params.tol_fix;
    let mut per_form = Vec::new();
    let mut all_ok = true;
    for &form in &ctx.config.forms {
        let report = ctx.solve(form)?;
        report.ensure_converged()?;
        let violations = check_lemma1(&report, &ctx.problem, ctx.config.verify.lemma1_tol)?;
        let sup = report.field.sup_norm();
        let bounded = sup <= bound + tol;
        let mu = ctx.config.verify.mu;
        let mu_gap = mu_scaling_gap(&ctx.problem, &report, mu, &ctx.params)?;
        let mu_ok = mu_gap <= 2.0 * tol;
        let residual = hjbi_residual(&report.field, &ctx.problem, form)?.sup_norm();
        all_ok &= violations.is_empty() && bounded && mu_ok;
        per_form.push(json!({
            "form": form,
            "iterations": report.iterations,
            "lemma1": {
                "tol": ctx.config.verify.lemma1_tol,
                "violation_count": violations.len(),
                "violations": violations.iter().take(20).collect::<Vec<_>>(),
            },
            "boundedness": {"sup_norm": sup, "bound": bound, "tol_fix": tol, "ok": bounded},
            "mu_scaling": {"mu": mu, "gap": mu_gap, "limit": 2.0 * tol, "ok": mu_ok},
            "residual_sup_norm": residual,
        }));
        println!(
            "{form}: lemma1 violations {}, bounded {bounded}, mu gap {mu_gap:.3e}, residual {residual:.3e}",
            violations.len()
        );
    }
    let doc = json!({
        "forms": per_form,
        "all_ok": all_ok,
        "validation": ctx.validation,
        "config": ctx.resolved,
    });
    write_json(&ctx.out.join("verify.json"), &doc)
}

fn cmd_compare(ctx: &Context) -> Result<()> {
    let l = ctx.solve(QviForm::L)?;
    let u = ctx.solve(QviForm::U)?;
    let lm = ctx.solve(QviForm::L_MAX)?;
    let um = ctx.solve(QviForm::U_MIN)?;
    let gap_lu = isaacs_gap(&l, &u)?;
    let gap_m = isaacs_gap(&lm, &um)?;
    let tolerance = ctx.config.compare.tolerance;
    let converged = [&l, &u, &lm, &um].iter().all(|r| r.converged);
    let doc = json!({
        "isaacs_gap_LU": gap_lu,
        "isaacs_gap_LmaxUmin": gap_m,
        "tolerance": tolerance,
        "within_tolerance": gap_lu <= tolerance && gap_m <= tolerance,
        "converged": converged,
        "config": ctx.resolved,
    });
    write_json(&ctx.out.join("compare.json"), &doc)?;
    println!("isaacs gap L/U {gap_lu:.3e}, Lmax/Umin {gap_m:.3e}");
    Ok(())
}
