//! Command-line runs. Each subcommand reads a [`RunConfig`], writes JSON
//! reports (and CSV tables) into the output directory and maps its outcome
//! onto the exit-code protocol of [`Outcome`].

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{BaseControl, RunConfig};
use crate::equilibrium::{equilibrium_test, EquilibriumReport, Verdict};
use crate::error::{Error, Result};
use crate::grids::{FeedbackControl, GridSpec};
use crate::hjbx::{
    residual_report, solve_extended_hjb, CandidateQuadruple, ConvergenceLog, SolverOptions,
};
use crate::model::{validate_problem, AssumptionCheck, ProblemSpec, Registry, ValidationReport};
use crate::regulator::{
    constant_control_values, counterexample_check, regulator_closed_form, time_consistent_value,
    value_gap, RegulatorParams,
};
use crate::report::{write_json, Metadata};
use crate::sde::{estimate_f, estimate_g, estimate_j, simulate_paths, SimConfig};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass = 0,
    Fail = 1,
    InputError = 2,
    NotConverged = 3,
    Inconclusive = 4,
}

impl Outcome {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn from_verdict(v: Verdict) -> Self {
        match v {
            Verdict::Pass => Outcome::Pass,
            Verdict::Fail => Outcome::Fail,
            Verdict::Inconclusive => Outcome::Inconclusive,
        }
    }

    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    /// Input problems map to 2; failures of the run itself to 1.
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Stability { .. } | Error::Evaluation { .. } | Error::NonFinite { .. } => {
                Outcome::Fail
            }
            _ => Outcome::InputError,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Regulator,
}

#[derive(Debug, Parser)]
#[command(
    name = "ticontrol",
    version,
    about = "Time-inconsistent stochastic control toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration, used when no --config is given.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spot-check the standing assumptions of the configured problem.
    Validate,
    /// Solve the extended HJB system on the configured grid.
    Solve,
    /// Residual report of a candidate (the regulator closed form by default).
    Residual {
        /// Directory holding V.csv, g.csv, f.csv and control.csv.
        #[arg(long)]
        candidate: Option<PathBuf>,
    },
    /// Spike-perturbation equilibrium test.
    Equilibrium,
    /// Monte Carlo estimates and sample paths.
    Simulate,
    /// Closed-form values, residuals, counterexample, equilibrium test and
    /// solver comparison for the quadratic regulator.
    RegulatorDemo {
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long = "horizon")]
        horizon: Option<f64>,
        #[arg(long)]
        x0: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Solve => "solve",
            Command::Residual { .. } => "residual",
            Command::Equilibrium => "equilibrium",
            Command::Simulate => "simulate",
            Command::RegulatorDemo { .. } => "regulator-demo",
        }
    }
}

/// Parses `args`, runs the command and returns the exit code. Diagnostics go
/// to stderr, a one-line summary to stdout.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                Outcome::InputError.code()
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &Registry::with_builtins()) {
        Ok(outcome) => {
            println!("{}: {:?}", cli.command.name(), outcome);
            outcome.code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            Outcome::from_error(&e).code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Regulator)) => RunConfig::regulator_preset(),
        (None, None) if matches!(cli.command, Command::RegulatorDemo { .. }) => {
            RunConfig::regulator_preset()
        }
        (None, None) => {
            return Err(Error::Config(
                "either --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

/// Runs one command with evaluators from `registry`.
pub fn run(cli: &Cli, registry: &Registry) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let cfg = load_config(cli)?;
    let cmd = cli.command.name();
    let meta = Metadata::new(cmd, &cfg.canonical_json(), cfg.seed);
    match &cli.command {
        Command::Validate => cmd_validate(&cfg, registry, &meta),
        Command::Solve => cmd_solve(&cfg, registry, &meta),
        Command::Residual { candidate } => {
            cmd_residual(&cfg, registry, candidate.as_deref(), &meta)
        }
        Command::Equilibrium => cmd_equilibrium(&cfg, registry, &meta),
        Command::Simulate => cmd_simulate(&cfg, registry, &meta),
        Command::RegulatorDemo {
            a,
            sigma,
            horizon,
            x0,
        } => {
            let mut params = *cfg
                .problem
                .regulator()
                .ok_or_else(|| Error::Config("regulator-demo needs a regulator problem".into()))?;
            params.a = a.unwrap_or(params.a);
            params.sigma = sigma.unwrap_or(params.sigma);
            params.horizon = horizon.unwrap_or(params.horizon);
            params.x0 = x0.unwrap_or(params.x0);
            let mut demo = RunConfig::regulator(params);
            demo.seed = cfg.seed;
            demo.output = cfg.output.clone();
            let meta = Metadata::new(cmd, &demo.canonical_json(), demo.seed);
            cmd_regulator_demo(&demo, &meta)
        }
    }
}

/// Problem-data errors become failed assumption checks rather than input
/// errors.
fn validation_for(
    cfg: &RunConfig,
    registry: &Registry,
) -> Result<(ValidationReport, Option<ProblemSpec>)> {
    let probes = cfg.validation.probes;
    let failed = |name: &str, e: Error| {
        ValidationReport::from_checks(
            probes,
            cfg.seed,
            vec![AssumptionCheck::failed(name, e.to_string())],
        )
    };
    if let Err(e) = cfg.problem.controls() {
        return Ok((failed("compactness", e), None));
    }
    match cfg.problem.build(registry) {
        Ok(spec) => Ok((validate_problem(&spec, probes, cfg.seed), Some(spec))),
        Err(e @ Error::Domain(_)) => Ok((failed("problem_data", e), None)),
        Err(e) => Err(e),
    }
}

pub fn cmd_validate(cfg: &RunConfig, registry: &Registry, meta: &Metadata) -> Result<Outcome> {
    let (report, _) = validation_for(cfg, registry)?;
    write_json(&cfg.output.join("validation.json"), meta, &report)?;
    for c in report.checks.iter() {
        eprintln!("{:<24} {:?} {}", c.name, c.status, c.detail);
    }
    Ok(Outcome::from_pass(report.all_pass))
}

/// Problem and grid described by `cfg`.
pub fn build_problem(cfg: &RunConfig, registry: &Registry) -> Result<(ProblemSpec, GridSpec)> {
    let spec = cfg.problem.build(registry)?;
    let grid = cfg.grid.build(spec.horizon)?;
    Ok((spec, grid))
}

#[derive(Serialize)]
struct SolveReport<'a> {
    converged: bool,
    log: &'a ConvergenceLog,
    /// Interior sup distance of `V` from the closed form (regulator only).
    closed_form_value_gap: Option<f64>,
}

pub fn cmd_solve(cfg: &RunConfig, registry: &Registry, meta: &Metadata) -> Result<Outcome> {
    let (spec, grid) = build_problem(cfg, registry)?;
    let sol = solve_extended_hjb(&spec, &grid, &cfg.solver)?;
    let dir = cfg.output.join("solve");
    sol.candidate
        .write_csv_dir(&dir, Some(&sol.control_table))?;
    let gap = cfg
        .problem
        .regulator()
        .map(|p| value_gap(p, &sol.candidate.v));
    let report = SolveReport {
        converged: sol.log.converged,
        log: &sol.log,
        closed_form_value_gap: gap,
    };
    write_json(&dir.join("convergence.json"), meta, &report)?;
    if !sol.log.converged {
        eprintln!("no convergence after {} sweeps", sol.log.sweeps.len());
        return Ok(Outcome::NotConverged);
    }
    Ok(Outcome::Pass)
}

fn load_candidate(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    grid: &GridSpec,
    dir: Option<&Path>,
) -> Result<CandidateQuadruple> {
    match (dir, cfg.problem.regulator()) {
        (Some(dir), _) => CandidateQuadruple::read_csv_dir(dir, spec, None),
        (None, Some(p)) => regulator_closed_form(p)?.tabulate(spec, grid),
        (None, None) => Err(Error::Config(
            "--candidate is required for problems without a closed form".into(),
        )),
    }
}

pub fn cmd_residual(
    cfg: &RunConfig,
    registry: &Registry,
    candidate: Option<&Path>,
    meta: &Metadata,
) -> Result<Outcome> {
    let (spec, grid) = build_problem(cfg, registry)?;
    let cand = load_candidate(cfg, &spec, &grid, candidate)?;
    // An auto-refined solve keeps the x lattice but not the time axis.
    let grid = if cfg.solver.auto_dt && cand.grid().x.same_nodes(&grid.x) {
        cand.grid().space_time()
    } else {
        grid
    };
    let report = residual_report(&cand, &spec, &grid, &cfg.thresholds)?;
    write_json(&cfg.output.join("residual.json"), meta, &report)?;
    for c in &report.checks {
        eprintln!(
            "{:<20} {:>12.3e} <= {:.1e} {}",
            c.name, c.value, c.threshold, c.pass
        );
    }
    Ok(Outcome::from_pass(report.pass))
}

fn base_control(
    base: &BaseControl,
    cfg: &RunConfig,
    spec: &ProblemSpec,
    grid: &GridSpec,
    solver: &SolverOptions,
) -> Result<FeedbackControl> {
    match base {
        BaseControl::ClosedForm => {
            let p = cfg.problem.regulator().ok_or_else(|| {
                Error::Config("closed_form base control needs a regulator problem".into())
            })?;
            Ok(regulator_closed_form(p)?.control)
        }
        BaseControl::Constant(u) => FeedbackControl::constant(u, &spec.controls),
        BaseControl::Solve => {
            let sol = solve_extended_hjb(spec, grid, solver)?;
            FeedbackControl::tabulated(sol.control_table, &spec.controls)
        }
    }
}

/// Equilibrium report for the `equilibrium` section of `cfg`.
pub fn run_equilibrium(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    grid: &GridSpec,
) -> Result<EquilibriumReport> {
    let eq = cfg
        .equilibrium
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no equilibrium section".into()))?;
    let base = base_control(&eq.base, cfg, spec, grid, &cfg.solver)?;
    let plan = eq.plan(&spec.controls, cfg.seed)?;
    equilibrium_test(spec, &base, &plan)
}

pub fn cmd_equilibrium(cfg: &RunConfig, registry: &Registry, meta: &Metadata) -> Result<Outcome> {
    let (spec, grid) = build_problem(cfg, registry)?;
    let report = run_equilibrium(cfg, &spec, &grid)?;
    write_json(&cfg.output.join("equilibrium.json"), meta, &report)?;
    report.write_csv(File::create(cfg.output.join("equilibrium.csv"))?)?;
    for e in &report.entries {
        let fit = e.fit.map_or("no fit".to_owned(), |f| {
            format!(
                "intercept {:+.4e} ± {:.2e}",
                f.intercept, f.intercept_stderr
            )
        });
        eprintln!(
            "t={} x={:?} dev={} r={}: {fit} {:?}",
            e.t, e.x, e.deviation, e.radius, e.verdict
        );
    }
    Ok(Outcome::from_verdict(report.verdict))
}

pub fn cmd_simulate(cfg: &RunConfig, registry: &Registry, meta: &Metadata) -> Result<Outcome> {
    let (spec, grid) = build_problem(cfg, registry)?;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no simulate section".into()))?;
    let control = base_control(&sim.control, cfg, &spec, &grid, &cfg.solver)?;
    let sc = SimConfig::new(sim.n_paths, sim.dt, cfg.seed).antithetic(sim.antithetic);
    let start = (sim.start.t, sim.start.x.as_slice());
    let j = estimate_j(&spec, &control, start, &sc)?;
    let g = estimate_g(&spec, &control, start, &sc)?;
    let f = estimate_f(&spec, &control, start, start, &sc)?;
    let mut written = SimConfig::new(sim.write_paths.max(2), sim.dt, cfg.seed);
    written.antithetic = false;
    std::fs::create_dir_all(&cfg.output)?;
    simulate_paths(&spec, &control, start, &written)?
        .write_csv(File::create(cfg.output.join("paths.csv"))?)?;
    let report = json!({
        "control": control.describe(),
        "start": {"t": sim.start.t, "x": sim.start.x},
        "dt": sim.dt,
        "antithetic": sim.antithetic,
        "J": j.to_json(cfg.seed),
        "g": g.to_json(cfg.seed),
        "f_at_start": f.to_json(cfg.seed),
    });
    write_json(&cfg.output.join("simulate.json"), meta, &report)?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct ClosedFormValues {
    u: f64,
    f: f64,
    g: f64,
    j: f64,
}

#[derive(Serialize)]
struct SubReport<T: Serialize> {
    expected: &'static str,
    observed: &'static str,
    as_expected: bool,
    detail: T,
}

fn sub<T: Serialize>(expected: &'static str, observed: &'static str, detail: T) -> SubReport<T> {
    SubReport {
        expected,
        observed,
        as_expected: expected == observed,
        detail,
    }
}

fn state(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

/// The five-part regulator bundle. Exits 0 when every part is in its
/// expected state: extended residuals pass, the frozen-anchor candidate fails
/// the classical equation (unless `a = 0`), the equilibrium test passes and
/// the solver reproduces the closed form.
pub fn cmd_regulator_demo(cfg: &RunConfig, meta: &Metadata) -> Result<Outcome> {
    let p: RegulatorParams = *cfg.problem.regulator().expect("regulator config");
    let dir = cfg.output.join("regulator");
    if let Err(e) = p.validate() {
        let report = ValidationReport::from_checks(
            cfg.validation.probes,
            cfg.seed,
            vec![AssumptionCheck::failed("problem_data", e.to_string())],
        );
        write_json(&dir.join("validation.json"), meta, &report)?;
        eprintln!("invalid regulator parameters: {e}");
        return Ok(Outcome::Fail);
    }
    let (spec, grid) = build_problem(cfg, &Registry::with_builtins())?;
    let validation = validate_problem(&spec, cfg.validation.probes, cfg.seed);
    write_json(&dir.join("validation.json"), meta, &validation)?;
    if !validation.all_pass {
        return Ok(Outcome::Fail);
    }

    let mut controls = vec![0.0, 0.5 * p.a, p.a];
    controls.dedup();
    let values = controls
        .iter()
        .map(|&u| {
            let v = constant_control_values(&p, u, 0.0, 0.0, 0.0)?;
            Ok(ClosedFormValues {
                u,
                f: v.f,
                g: v.g,
                j: v.j,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let closed_form = json!({
        "params": p,
        "constant_controls_at_origin": values,
        "time_consistent_K": {
            "K(0, x0)": time_consistent_value(&p, 0.0, p.x0),
            "K(0, x0 - 1)": time_consistent_value(&p, 0.0, p.x0 - 1.0),
            "K(T, x0 + 1)": time_consistent_value(&p, p.horizon, p.x0 + 1.0),
        },
    });
    write_json(&dir.join("closed_form.json"), meta, &closed_form)?;

    let counter = counterexample_check(&p, &grid, &cfg.thresholds)?;
    let extended = sub("pass", state(counter.extended.pass), &counter.extended);
    write_json(&dir.join("extended_residual.json"), meta, &extended)?;
    let classical_expected = if p.a > 0.0 { "fail" } else { "pass" };
    let standard = sub(
        classical_expected,
        state(counter.standard.solves),
        &counter.standard,
    );
    write_json(&dir.join("standard_residual.json"), meta, &standard)?;

    let eq_report = run_equilibrium(cfg, &spec, &grid)?;
    let verdict = match eq_report.verdict {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    };
    let equilibrium = sub("pass", verdict, &eq_report);
    write_json(&dir.join("equilibrium.json"), meta, &equilibrium)?;
    eq_report.write_csv(File::create(dir.join("equilibrium.csv"))?)?;

    let opts = SolverOptions {
        auto_dt: true,
        ..cfg.solver
    };
    let sol = solve_extended_hjb(&spec, &grid, &opts)?;
    let gap = value_gap(&p, &sol.candidate.v);
    let zero_control = sol.control_table.values().iter().all(|&u| u == 0.0);
    let recovered = sol.log.converged && zero_control && gap <= 1e-3;
    let solver = sub(
        "pass",
        state(recovered),
        json!({
            "converged": sol.log.converged,
            "control_identically_zero": zero_control,
            "interior_value_gap": gap,
            "tolerance": 1e-3,
            "log": sol.log,
        }),
    );
    write_json(&dir.join("solver_comparison.json"), meta, &solver)?;
    sol.candidate
        .write_csv_dir(&dir.join("solve"), Some(&sol.control_table))?;

    let parts = [
        ("extended_residual", extended.as_expected),
        ("standard_residual", standard.as_expected),
        ("equilibrium", equilibrium.as_expected),
        ("solver_comparison", solver.as_expected),
    ];
    for (name, ok) in parts {
        eprintln!(
            "{name:<20} {}",
            if ok { "as expected" } else { "UNEXPECTED" }
        );
    }
    Ok(Outcome::from_pass(parts.iter().all(|(_, ok)| *ok)))
}
