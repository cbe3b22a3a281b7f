//! Command implementations and report emission.

use crate::config::{self, BetaMode, RunConfig, SelectorConfig};
use ambsde_core::analysis::{
    apriori_check, compare_direct, contraction_report, monotone_iteration, select_beta,
    BetaSelection, ComparisonProblem,
};
use ambsde_core::lattice::{build_grid, validate_delays, DelaySpec, TimeGrid, ValidationReport};
use ambsde_core::noise::{simulate_ensemble, LevyModel, PathEnsemble};
use ambsde_core::registry;
use ambsde_core::solver::{
    picard_solve, CondExpEstimator, IterationTrace, PicardConfig, ProblemSpec, SolutionField,
};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Process exit codes: 0 pass, 1 verdict fail, 2 configuration error,
/// 3 solver failure or non-convergence.
pub enum Failure {
    Config(String),
    Verdict(String),
    Solver(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Verdict(_) => 1,
            Failure::Solver(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Verdict(m) | Failure::Solver(m) => m,
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn config_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn solver_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Solver(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Solver(format!("i/o: {e}"))
}

/// Everything a command needs, assembled from one config file.
pub struct BuiltRun {
    pub grid: TimeGrid,
    pub delay_report: ValidationReport,
    pub levy: LevyModel,
    pub ensemble: PathEnsemble,
    pub problem: ProblemSpec,
    pub problem2: Option<ProblemSpec>,
    pub estimator: CondExpEstimator,
    pub picard: PicardConfig,
    pub beta_mode: String,
    pub beta_selected: bool,
    pub beta_residual: Option<f64>,
    pub seed: u64,
    pub n_rounds: usize,
    pub out_dir: PathBuf,
}

fn build_pair(
    selector: &SelectorConfig,
    terminal_sel: &SelectorConfig,
    grid: &TimeGrid,
    delays: &DelaySpec,
    levy: &LevyModel,
    ensemble: &PathEnsemble,
    d: usize,
    declared_c: Option<f64>,
) -> Result<ProblemSpec, Failure> {
    let driver_entry = registry::find_driver(&selector.name).map_err(config_err)?;
    let (driver, default_c) = driver_entry.build(&selector.params()).map_err(config_err)?;
    let terminal_entry = registry::find_terminal(&terminal_sel.name).map_err(config_err)?;
    let terminal = terminal_entry
        .build(&terminal_sel.params(), grid, levy, ensemble, d)
        .map_err(config_err)?;
    ProblemSpec::new(
        grid.clone(),
        delays.clone(),
        levy.clone(),
        d,
        driver,
        terminal,
        declared_c.unwrap_or(default_c),
    )
    .map_err(config_err)
}

/// Assemble a run: grid, delay validation, noise simulation, registry
/// lookups, problem validation, and the stopping-norm weight.
pub fn build(
    config: &RunConfig,
    command: &str,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<BuiltRun, Failure> {
    if let Some(declared) = &config.experiment.command {
        if declared != command {
            return Err(Failure::Config(format!(
                "config declares command \"{declared}\" but \"{command}\" was invoked"
            )));
        }
    }
    let p = &config.problem;
    let grid = build_grid(p.horizon, p.window, p.n_steps).map_err(config_err)?;
    let delays = p.delays.to_spec();
    let delay_report = validate_delays(&grid, &delays);
    if !delay_report.pass {
        return Err(Failure::Config(format!(
            "delay validation failed: {}",
            delay_report
                .failure_message()
                .unwrap_or_else(|| "unknown".into())
        )));
    }
    let levy = match &p.levy {
        Some(cfg) => cfg.to_model().map_err(config_err)?,
        None => LevyModel::none(),
    };
    let seed = seed_override.unwrap_or(config.experiment.seed);
    let n = config.numerics.n_particles;
    let ensemble = simulate_ensemble(&grid, &levy, p.d, n, seed).map_err(config_err)?;

    let problem = build_pair(
        &p.driver,
        &p.terminal,
        &grid,
        &delays,
        &levy,
        &ensemble,
        p.d,
        p.lipschitz_c,
    )?;
    let problem2 = match (&p.driver2, &p.terminal2) {
        (Some(driver2), Some(terminal2)) => Some(build_pair(
            driver2,
            terminal2,
            &grid,
            &delays,
            &levy,
            &ensemble,
            p.d,
            p.lipschitz_c,
        )?),
        _ => None,
    };

    let (beta, beta_mode, beta_selected, beta_residual) = match &config.numerics.beta {
        BetaMode::Fixed(v) => (*v, "fixed".to_string(), false, None),
        BetaMode::Named(_) => {
            let l = delay_report
                .certified_l
                .expect("validated delays certify a constant");
            match select_beta(
                problem.lipschitz_c,
                l,
                &levy,
                delays.rho,
                grid.horizon(),
                grid.window(),
            ) {
                BetaSelection::Solved { beta, residual } => {
                    (beta, "auto-selected".to_string(), true, Some(residual))
                }
                BetaSelection::NoSolution { .. } => {
                    (0.0, "auto-fallback".to_string(), false, None)
                }
            }
        }
    };

    let picard = PicardConfig {
        beta,
        tol: config.numerics.tol,
        max_iter: config.numerics.max_iter,
        damping: config.numerics.damping,
    };
    picard.validate().map_err(config_err)?;
    let estimator = CondExpEstimator {
        degree: config.numerics.basis_degree,
        ridge: config.numerics.ridge,
    };

    let out_dir = out_override
        .or_else(|| config.experiment.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ambsde-out"));

    Ok(BuiltRun {
        grid,
        delay_report,
        levy,
        ensemble,
        problem,
        problem2,
        estimator,
        picard,
        beta_mode,
        beta_selected,
        beta_residual,
        seed,
        n_rounds: config.numerics.n_rounds,
        out_dir,
    })
}

#[derive(Serialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub n_particles: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub horizon: f64,
    pub window: f64,
    pub beta: f64,
    pub beta_mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certified_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff_norms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering_violation_fractions: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol_band: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gap_at_zero: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_sup_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apriori_lhs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apriori_rhs_core: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apriori_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Summary {
    fn new(command: &str, run: &BuiltRun) -> Self {
        Summary {
            command: command.to_string(),
            seed: run.seed,
            n_particles: run.ensemble.n_particles(),
            n_steps: run.grid.last_index(),
            dt: run.grid.dt(),
            horizon: run.grid.horizon(),
            window: run.grid.window(),
            beta: run.picard.beta,
            beta_mode: run.beta_mode.clone(),
            beta_residual: run.beta_residual,
            certified_l: run.delay_report.certified_l,
            y0_mean: None,
            converged: None,
            iterations: None,
            diff_norms: None,
            gamma_consistency: None,
            ratios: None,
            fitted_ratio: None,
            violation_fraction: None,
            ordering_violation_fractions: None,
            tol_band: None,
            scale: None,
            mean_gap_at_zero: None,
            limit_sup_gap: None,
            apriori_lhs: None,
            apriori_rhs_core: None,
            apriori_ratio: None,
            pass: None,
            note: None,
        }
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io_err)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(summary).map_err(io_err)?;
    std::fs::write(dir.join("summary.json"), json + "\n").map_err(io_err)
}

fn write_trace_csv(dir: &Path, trace: &IterationTrace) -> Result<(), Failure> {
    let mut text = String::from("iteration,beta_norm_diff,ratio\n");
    let ratios = trace.ratios();
    for (i, norm) in trace.diff_norms.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            format!("{}", ratios[i - 1])
        };
        let _ = writeln!(text, "{},{},{}", i + 1, norm, ratio);
    }
    std::fs::write(dir.join("trace.csv"), text).map_err(io_err)
}

fn write_solution_csv(dir: &Path, grid: &TimeGrid, field: &SolutionField) -> Result<(), Failure> {
    let d = field.brownian_dim();
    let m = field.n_marks();
    let mut header = String::from("time,particle,Y");
    for c in 0..d {
        let _ = write!(header, ",Z_{}", c + 1);
    }
    for j in 0..m {
        let _ = write!(header, ",K_{}", j + 1);
    }
    header.push_str(",gamma\n");
    let mut text = header;
    for i in 0..field.n_times() {
        let t = grid.time(i);
        for p in 0..field.n_particles() {
            let _ = write!(text, "{t},{p},{}", field.y(i, p));
            for c in 0..d {
                let _ = write!(text, ",{}", field.z(i, p, c));
            }
            for j in 0..m {
                let _ = write!(text, ",{}", field.k(i, p, j));
            }
            let _ = writeln!(text, ",{}", field.gamma(i, p));
        }
    }
    std::fs::write(dir.join("solution.csv"), text).map_err(io_err)
}

pub fn cmd_solve(run: &BuiltRun) -> CmdResult {
    ensure_out_dir(&run.out_dir)?;
    let (field, trace) = picard_solve(&run.problem, &run.ensemble, &run.estimator, &run.picard)
        .map_err(solver_err)?;
    write_solution_csv(&run.out_dir, &run.grid, &field)?;
    write_trace_csv(&run.out_dir, &trace)?;
    let n = field.n_particles() as f64;
    let mut summary = Summary::new("solve", run);
    summary.y0_mean = Some(field.y_at(0).iter().sum::<f64>() / n);
    summary.converged = Some(trace.converged);
    summary.iterations = Some(trace.diff_norms.len());
    summary.diff_norms = Some(trace.diff_norms.clone());
    summary.gamma_consistency = Some(field.gamma_consistency_error(&run.levy));
    write_summary(&run.out_dir, &summary)?;
    if trace.converged {
        Ok(())
    } else {
        Err(Failure::Solver(format!(
            "no convergence in {} iterations (last difference norm {:e})",
            trace.diff_norms.len(),
            trace.diff_norms.last().copied().unwrap_or(f64::NAN)
        )))
    }
}

pub fn cmd_contraction(run: &BuiltRun) -> CmdResult {
    ensure_out_dir(&run.out_dir)?;
    let (_, trace) = picard_solve(&run.problem, &run.ensemble, &run.estimator, &run.picard)
        .map_err(solver_err)?;
    write_trace_csv(&run.out_dir, &trace)?;
    let report = contraction_report(&trace, run.beta_selected);
    let mut summary = Summary::new("contraction", run);
    summary.converged = Some(trace.converged);
    summary.iterations = Some(trace.diff_norms.len());
    summary.diff_norms = Some(trace.diff_norms.clone());
    summary.ratios = Some(report.ratios.clone());
    summary.fitted_ratio = report.fitted_ratio;
    summary.pass = Some(report.pass);
    summary.note = report.note.clone();
    write_summary(&run.out_dir, &summary)?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verdict(format!(
            "contraction verdict failed (fitted ratio {:?})",
            report.fitted_ratio
        )))
    }
}

pub fn cmd_compare(run: &BuiltRun) -> CmdResult {
    ensure_out_dir(&run.out_dir)?;
    let problem2 = run
        .problem2
        .clone()
        .ok_or_else(|| Failure::Config("compare needs driver2 and terminal2".into()))?;
    let pair = ComparisonProblem::new(run.problem.clone(), problem2).map_err(config_err)?;
    let report =
        compare_direct(&pair, &run.ensemble, &run.estimator, &run.picard).map_err(solver_err)?;

    let mut text = String::from("time,mean_gap\n");
    for (i, gap) in report.mean_gap.iter().enumerate() {
        let _ = writeln!(text, "{},{}", run.grid.time(i), gap);
    }
    std::fs::write(run.out_dir.join("report.csv"), text).map_err(io_err)?;

    let mut summary = Summary::new("compare", run);
    summary.violation_fraction = Some(report.violation_fraction);
    summary.tol_band = Some(report.tol_band);
    summary.scale = Some(report.scale);
    summary.mean_gap_at_zero = report.mean_gap.first().copied();
    summary.pass = Some(report.pass);
    write_summary(&run.out_dir, &summary)?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verdict(format!(
            "ordering violated on fraction {} of the grid",
            report.violation_fraction
        )))
    }
}

pub fn cmd_monotone(run: &BuiltRun) -> CmdResult {
    ensure_out_dir(&run.out_dir)?;
    let problem2 = run
        .problem2
        .clone()
        .ok_or_else(|| Failure::Config("monotone needs driver2 and terminal2".into()))?;
    let (f1_solution, f1_trace) =
        picard_solve(&run.problem, &run.ensemble, &run.estimator, &run.picard)
            .map_err(solver_err)?;
    if !f1_trace.converged {
        return Err(Failure::Solver(
            "upper anticipated solve did not converge".into(),
        ));
    }
    let report = monotone_iteration(
        &problem2,
        &f1_solution,
        &run.ensemble,
        &run.estimator,
        &run.picard,
        run.n_rounds,
    )
    .map_err(solver_err)?;

    let mut text = String::from("stage,diff_norm,ordering_violation_fraction\n");
    for (idx, frac) in report.ordering_violation_fractions.iter().enumerate() {
        let diff = if idx == 0 {
            String::new()
        } else {
            format!("{}", report.diff_norms[idx - 1])
        };
        let _ = writeln!(text, "{},{},{}", idx + 1, diff, frac);
    }
    std::fs::write(run.out_dir.join("report.csv"), text).map_err(io_err)?;

    let mut summary = Summary::new("monotone", run);
    summary.ordering_violation_fractions = Some(report.ordering_violation_fractions.clone());
    summary.diff_norms = Some(report.diff_norms.clone());
    summary.fitted_ratio = report.fitted_ratio;
    summary.limit_sup_gap = Some(report.limit_sup_gap);
    summary.tol_band = Some(report.tol_band);
    summary.pass = Some(report.pass);
    summary.note = report.note.clone();
    write_summary(&run.out_dir, &summary)?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verdict("monotone chain verdict failed".into()))
    }
}

pub fn cmd_apriori(run: &BuiltRun) -> CmdResult {
    ensure_out_dir(&run.out_dir)?;
    let (field, trace) = picard_solve(&run.problem, &run.ensemble, &run.estimator, &run.picard)
        .map_err(solver_err)?;
    if !trace.converged {
        return Err(Failure::Solver("solve did not converge".into()));
    }
    let report = apriori_check(&run.problem, &field);
    let mut text = String::from("lhs,rhs_core,ratio\n");
    let _ = writeln!(
        text,
        "{},{},{}",
        report.lhs,
        report.rhs_core,
        report
            .ratio
            .map(|r| r.to_string())
            .unwrap_or_default()
    );
    std::fs::write(run.out_dir.join("report.csv"), text).map_err(io_err)?;

    let mut summary = Summary::new("apriori", run);
    summary.apriori_lhs = Some(report.lhs);
    summary.apriori_rhs_core = Some(report.rhs_core);
    summary.apriori_ratio = report.ratio;
    summary.pass = Some(!report.anomaly);
    write_summary(&run.out_dir, &summary)?;
    if report.anomaly {
        Err(Failure::Verdict(
            "zero data produced a nonzero solution".into(),
        ))
    } else {
        Ok(())
    }
}

pub fn cmd_validate(run: &BuiltRun) -> CmdResult {
    // Reaching this point means the full build validated: grid, delays,
    // jump model, registry lookups, terminal shape, Lipschitz probe.
    ensure_out_dir(&run.out_dir)?;
    let mut summary = Summary::new("validate", run);
    summary.pass = Some(true);
    let mut notes = Vec::new();
    for (name, check) in ["delta1", "delta2", "delta3"]
        .iter()
        .zip(run.delay_report.checks.iter())
    {
        notes.push(format!(
            "{name}: max overshoot {:.3e}, L = {:?}",
            check.max_overshoot, check.l_constant
        ));
    }
    summary.note = Some(notes.join("; "));
    write_summary(&run.out_dir, &summary)?;
    println!(
        "validation passed: certified substitution constant L = {}",
        run.delay_report.certified_l.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_list() -> CmdResult {
    println!("drivers:");
    for entry in registry::drivers() {
        println!("  {:<24} {}", entry.name, entry.doc);
        for p in entry.params {
            match p.default {
                Some(d) => println!("      {:<20} {} (default {d})", p.name, p.doc),
                None => println!("      {:<20} {} (required)", p.name, p.doc),
            }
        }
    }
    println!("terminals:");
    for entry in registry::terminals() {
        println!("  {:<24} {}", entry.name, entry.doc);
        for p in entry.params {
            match p.default {
                Some(d) => println!("      {:<20} {} (default {d})", p.name, p.doc),
                None => println!("      {:<20} {} (required)", p.name, p.doc),
            }
        }
    }
    Ok(())
}

/// Dispatch one subcommand against a parsed config.
pub fn execute(
    command: &str,
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> CmdResult {
    let config = config::load(config_path).map_err(Failure::Config)?;
    let run = build(&config, command, seed, out)?;
    match command {
        "solve" => cmd_solve(&run),
        "contraction" => cmd_contraction(&run),
        "compare" => cmd_compare(&run),
        "monotone" => cmd_monotone(&run),
        "apriori" => cmd_apriori(&run),
        "validate" => cmd_validate(&run),
        other => Err(Failure::Config(format!("unknown command {other}"))),
    }
}
