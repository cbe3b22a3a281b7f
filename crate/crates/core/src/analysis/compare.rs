//! Comparison harness: the direct ordering check for mean-field drivers
//! and the monotone chain that squeezes an anticipated solution between
//! successively frozen stages.

use super::{beta_norm_diff, CONTRACTION_PASS_RATIO};
use crate::error::{Error, Result};
use crate::measure::{lions_derivative_estimate, EmpiricalMeasure};
use crate::noise::PathEnsemble;
use crate::solver::{
    picard_solve, solve_mf_bsde, CondExpEstimator, DriverArgs, FrozenAnticipated, PicardConfig,
    ProblemSpec, SolutionField,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of randomized probes in the ordering and monotonicity checks.
const PROBES: usize = 200;
/// Slack multiplier on declared derivative bounds.
const DERIVATIVE_SLACK: f64 = 1.05;

/// Width of the acceptance band for pathwise ordering checks:
/// `5 (dt + N^{-1/2})` times the empirical solution scale, sized so that
/// discretization and Monte Carlo noise cannot produce false violations.
pub fn tolerance_band(dt: f64, n_particles: usize, scale: f64) -> f64 {
    5.0 * (dt + (n_particles as f64).powf(-0.5)) * scale
}

/// An ordered pair of problems sharing grid, delays, noise model and
/// dimension, validated for the comparison hypotheses.
#[derive(Debug, Clone)]
pub struct ComparisonProblem {
    pub problem1: ProblemSpec,
    pub problem2: ProblemSpec,
}

impl ComparisonProblem {
    /// Validate the pair:
    /// - shared discretization and noise model;
    /// - driver ordering `f1 >= f2` on a randomized argument grid
    ///   (zero tolerance: the hypothesis is pointwise);
    /// - terminal ordering `phi1 >= phi2` everywhere on the window;
    /// - derivative probes on the slots driver 1 declares: the jump-slot
    ///   and law-slot sensitivities must lie in `(0, 1.05 C]`;
    /// - monotonicity of driver 2 in its anticipated slots, probed on
    ///   ordered input pairs.
    pub fn new(problem1: ProblemSpec, problem2: ProblemSpec) -> Result<Self> {
        if problem1.grid != problem2.grid {
            return Err(Error::Comparison("grids differ".into()));
        }
        if problem1.levy != problem2.levy {
            return Err(Error::Comparison("jump models differ".into()));
        }
        if problem1.d != problem2.d {
            return Err(Error::Comparison("Brownian dimensions differ".into()));
        }
        let pair = ComparisonProblem { problem1, problem2 };
        pair.check_terminal_order()?;
        pair.check_driver_order()?;
        pair.check_monotonicity()?;
        Ok(pair)
    }

    fn check_terminal_order(&self) -> Result<()> {
        let t1 = &self.problem1.terminal;
        let t2 = &self.problem2.terminal;
        if t1.n_particles() != t2.n_particles() || t1.window_len() != t2.window_len() {
            return Err(Error::Comparison("terminal shapes differ".into()));
        }
        for w in 0..t1.window_len() {
            for p in 0..t1.n_particles() {
                if t1.phi(w, p) < t2.phi(w, p) {
                    return Err(Error::Comparison(format!(
                        "terminal ordering violated at window index {w}, particle {p}: {} < {}",
                        t1.phi(w, p),
                        t2.phi(w, p)
                    )));
                }
            }
        }
        Ok(())
    }

    fn random_args(rng: &mut ChaCha8Rng, d: usize, t_max: f64) -> (f64, ProbePoint) {
        let t = rng.random_range(0.0..=t_max);
        let point = ProbePoint {
            y: rng.random_range(-2.0..2.0),
            z: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            gamma: rng.random_range(-2.0..2.0),
            a: rng.random_range(-2.0..2.0),
            a_bar: rng.random_range(-2.0..2.0),
            law: EmpiricalMeasure::scalar(
                (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .expect("probe cloud"),
        };
        (t, point)
    }

    fn check_driver_order(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6f72_6465);
        let d = self.problem1.d;
        let t_max = self.problem1.grid.horizon();
        for _ in 0..PROBES {
            let (t, point) = Self::random_args(&mut rng, d, t_max);
            let f1 = self.problem1.driver.eval(&point.args(t, d));
            let f2 = self.problem2.driver.eval(&point.args(t, d));
            if f1 < f2 {
                return Err(Error::Comparison(format!(
                    "driver ordering violated on a probe at t = {t}: f1 = {f1} < f2 = {f2}"
                )));
            }
        }
        Ok(())
    }

    fn check_monotonicity(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f_6e6f);
        let d = self.problem1.d;
        let t_max = self.problem1.grid.horizon();
        let flags1 = self.problem1.driver.flags;
        let bound = DERIVATIVE_SLACK * self.problem1.lipschitz_c;

        // Jump-slot sensitivity of driver 1.
        if flags1.uses_gamma {
            for _ in 0..PROBES {
                let (t, point) = Self::random_args(&mut rng, d, t_max);
                let h = 1e-4 * (1.0 + point.gamma.abs());
                let mut plus = point.clone();
                plus.gamma += h;
                let mut minus = point.clone();
                minus.gamma -= h;
                let deriv = (self.problem1.driver.eval(&plus.args(t, d))
                    - self.problem1.driver.eval(&minus.args(t, d)))
                    / (2.0 * h);
                if !(deriv > 0.0 && deriv <= bound) {
                    return Err(Error::Comparison(format!(
                        "jump-slot sensitivity {deriv} of driver 1 outside (0, {bound}]"
                    )));
                }
            }
        }

        // Law-slot sensitivity of driver 1 via one-particle perturbation.
        if flags1.uses_law {
            for _ in 0..PROBES {
                let (t, point) = Self::random_args(&mut rng, d, t_max);
                let p = rng.random_range(0..point.law.len());
                let driver = &self.problem1.driver;
                let lift = |law: &EmpiricalMeasure| -> f64 {
                    let probed = point.clone_with_law(law.clone());
                    driver.eval(&probed.args(t, d))
                };
                let sample_scale = point.law.sample(p)[0].abs();
                let deriv =
                    lions_derivative_estimate(lift, &point.law, p, 1e-4 * (1.0 + sample_scale))?
                        [0];
                if !(deriv > 0.0 && deriv <= bound) {
                    return Err(Error::Comparison(format!(
                        "law-slot sensitivity {deriv} of driver 1 outside (0, {bound}]"
                    )));
                }
            }
        }

        // Driver 2 must be nondecreasing in its anticipated slots.
        let flags2 = self.problem2.driver.flags;
        if flags2.uses_a || flags2.uses_a_bar {
            for _ in 0..PROBES {
                let (t, point) = Self::random_args(&mut rng, d, t_max);
                let mut higher = point.clone();
                if flags2.uses_a {
                    higher.a += rng.random_range(0.0..1.0);
                }
                if flags2.uses_a_bar {
                    higher.a_bar += rng.random_range(0.0..1.0);
                }
                let lo = self.problem2.driver.eval(&point.args(t, d));
                let hi = self.problem2.driver.eval(&higher.args(t, d));
                if hi < lo {
                    return Err(Error::Comparison(format!(
                        "driver 2 decreases in an anticipated slot: {hi} < {lo}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ProbePoint {
    y: f64,
    z: Vec<f64>,
    gamma: f64,
    a: f64,
    a_bar: f64,
    law: EmpiricalMeasure,
}

impl ProbePoint {
    fn args<'a>(&'a self, t: f64, _d: usize) -> DriverArgs<'a> {
        static EMPTY: [f64; 8] = [0.0; 8];
        DriverArgs {
            t,
            y: self.y,
            z: &self.z,
            gamma: self.gamma,
            a: self.a,
            b: &EMPTY[..self.z.len()],
            c: 0.0,
            a_bar: self.a_bar,
            b_bar: &EMPTY[..self.z.len()],
            c_bar: 0.0,
            law: &self.law,
        }
    }

    fn clone_with_law(&self, law: EmpiricalMeasure) -> ProbePoint {
        let mut out = self.clone();
        out.law = law;
        out
    }
}

/// Outcome of the direct pathwise comparison of two solved fields.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Fraction of `(grid time <= T, particle)` pairs with
    /// `Y1 < Y2 - tol_band`.
    pub violation_fraction: f64,
    /// Largest `Y2 - Y1` observed (negative when the ordering is strict).
    pub max_gap_reversal: f64,
    pub tol_band: f64,
    pub scale: f64,
    /// `mean_p(Y1 - Y2)` per grid time up to the horizon.
    pub mean_gap: Vec<f64>,
    pub pass: bool,
}

/// Solve both mean-field problems on the same ensemble and check the
/// pathwise ordering `Y1 >= Y2` up to the tolerance band.
pub fn compare_direct(
    pair: &ComparisonProblem,
    ensemble: &PathEnsemble,
    estimator: &CondExpEstimator,
    config: &PicardConfig,
) -> Result<ComparisonReport> {
    for (which, problem) in [(1, &pair.problem1), (2, &pair.problem2)] {
        if !problem.driver.flags.is_mean_field_only() {
            return Err(Error::Comparison(format!(
                "driver {which} is not in the non-anticipated mean-field form"
            )));
        }
    }
    let field1 = solve_mf_bsde(&pair.problem1, ensemble, estimator, config, None)?;
    let field2 = solve_mf_bsde(&pair.problem2, ensemble, estimator, config, None)?;
    Ok(report_ordering(
        &field1,
        &field2,
        &pair.problem1,
        ensemble.n_particles(),
    ))
}

fn report_ordering(
    upper: &SolutionField,
    lower: &SolutionField,
    problem: &ProblemSpec,
    n_particles: usize,
) -> ComparisonReport {
    let n_horizon = problem.grid.horizon_index();
    let scale = upper.max_abs_y(n_horizon).max(lower.max_abs_y(n_horizon));
    let tol_band = tolerance_band(problem.grid.dt(), n_particles, scale);
    let mut violations = 0usize;
    let mut max_gap_reversal = f64::NEG_INFINITY;
    let mut mean_gap = vec![0.0; n_horizon + 1];
    for i in 0..=n_horizon {
        let mut acc = 0.0;
        for p in 0..n_particles {
            let gap = upper.y(i, p) - lower.y(i, p);
            acc += gap;
            max_gap_reversal = max_gap_reversal.max(-gap);
            if gap < -tol_band {
                violations += 1;
            }
        }
        mean_gap[i] = acc / n_particles as f64;
    }
    let total = (n_horizon + 1) * n_particles;
    let violation_fraction = violations as f64 / total as f64;
    ComparisonReport {
        violation_fraction,
        max_gap_reversal,
        tol_band,
        scale,
        mean_gap,
        pass: violations == 0,
    }
}

/// Outcome of the monotone chain.
#[derive(Debug, Clone)]
pub struct MonotoneReport {
    /// Violation fraction of each ordering link, starting with
    /// `Y1 >= Y_first_stage`.
    pub ordering_violation_fractions: Vec<f64>,
    /// Weighted norms of successive stage differences.
    pub diff_norms: Vec<f64>,
    /// Geometric-mean ratio of the difference norms, absent when the chain
    /// hits an exact fixed point.
    pub fitted_ratio: Option<f64>,
    /// Largest `|Y_last_stage - Y_direct|` against the directly solved
    /// anticipated problem.
    pub limit_sup_gap: f64,
    pub tol_band: f64,
    pub pass: bool,
    pub note: Option<String>,
}

/// Run the monotone chain: each stage solves the mean-field equation with
/// the anticipated slots frozen from the previous stage (stage one freezes
/// from the given upper solution), then checks the ordering
/// `Y1 >= Y_stage1 >= ... >= Y_stageN`, the decay of successive stage
/// differences, and agreement of the final stage with the directly solved
/// anticipated problem.
#[allow(clippy::too_many_arguments)]
pub fn monotone_iteration(
    problem2: &ProblemSpec,
    f1_solution: &SolutionField,
    ensemble: &PathEnsemble,
    estimator: &CondExpEstimator,
    config: &PicardConfig,
    n_rounds: usize,
) -> Result<MonotoneReport> {
    if !problem2.driver.flags.is_restricted() {
        return Err(Error::Comparison(
            "chain driver must be in the restricted signature".into(),
        ));
    }
    if n_rounds == 0 {
        return Err(Error::Comparison("need at least one chain stage".into()));
    }

    let mut stages: Vec<SolutionField> = Vec::with_capacity(n_rounds);
    {
        let mut source = f1_solution;
        for _ in 0..n_rounds {
            let frozen = FrozenAnticipated::from_solution(
                source,
                estimator,
                ensemble,
                &problem2.delays,
            );
            let stage = solve_mf_bsde(problem2, ensemble, estimator, config, Some(&frozen))?;
            stages.push(stage);
            source = stages.last().unwrap();
        }
    }

    let (direct, direct_trace) = picard_solve(problem2, ensemble, estimator, config)?;
    let direct_converged = direct_trace.converged;

    let n_horizon = problem2.grid.horizon_index();
    let n = ensemble.n_particles();
    let mut scale = f1_solution.max_abs_y(n_horizon).max(direct.max_abs_y(n_horizon));
    for stage in &stages {
        scale = scale.max(stage.max_abs_y(n_horizon));
    }
    let tol_band = tolerance_band(problem2.grid.dt(), n, scale);

    let mut ordering_violation_fractions = Vec::with_capacity(stages.len());
    let mut upper = f1_solution;
    for stage in &stages {
        let mut violations = 0usize;
        for i in 0..=n_horizon {
            for p in 0..n {
                if upper.y(i, p) < stage.y(i, p) - tol_band {
                    violations += 1;
                }
            }
        }
        ordering_violation_fractions
            .push(violations as f64 / ((n_horizon + 1) * n) as f64);
        upper = stage;
    }

    let mut diff_norms = Vec::new();
    for w in stages.windows(2) {
        diff_norms.push(beta_norm_diff(
            &w[1],
            &w[0],
            &problem2.levy,
            config.beta,
            &problem2.grid,
        ));
    }

    let mut note = None;
    let fitted_ratio = if diff_norms.iter().any(|&v| v == 0.0) {
        note = Some("chain reached an exact fixed point".to_string());
        None
    } else if diff_norms.len() >= 2 {
        let ratios: Vec<f64> = diff_norms.windows(2).map(|w| w[1] / w[0]).collect();
        Some((ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp())
    } else {
        None
    };

    let last = stages.last().expect("at least one stage");
    let mut limit_sup_gap = 0.0f64;
    for i in 0..=n_horizon {
        for p in 0..n {
            limit_sup_gap = limit_sup_gap.max((last.y(i, p) - direct.y(i, p)).abs());
        }
    }

    let ordering_ok = ordering_violation_fractions.iter().all(|&f| f == 0.0);
    let decay_ok = fitted_ratio.is_none_or(|r| r <= CONTRACTION_PASS_RATIO);
    let limit_ok = limit_sup_gap <= tol_band;
    let pass = ordering_ok && decay_ok && limit_ok && direct_converged;
    if !direct_converged {
        note = Some("direct anticipated solve did not converge".to_string());
    }

    Ok(MonotoneReport {
        ordering_violation_fractions,
        diff_norms,
        fitted_ratio,
        limit_sup_gap,
        tol_band,
        pass,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_grid, DelayFn, DelaySpec};
    use crate::noise::{simulate_ensemble, LevyModel};
    use crate::solver::{Driver, DriverFlags, LawMarginal, TerminalData};

    fn mf_flags() -> DriverFlags {
        DriverFlags {
            uses_law: true,
            law_marginal: LawMarginal::YOnly,
            ..Default::default()
        }
    }

    fn setup(n: usize) -> (crate::lattice::TimeGrid, DelaySpec, LevyModel, PathEnsemble) {
        let grid = build_grid(0.5, 0.0, 50).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 21).unwrap();
        (grid, delays, levy, ensemble)
    }

    #[test]
    fn ordered_constant_drivers_have_no_violations() {
        let n = 2000;
        let (grid, delays, levy, ensemble) = setup(n);
        let terminal = TerminalData::constant(&grid, n, 1, 0, 0.0).unwrap();
        let p1 = ProblemSpec::new(
            grid.clone(),
            delays.clone(),
            levy.clone(),
            1,
            Driver::new(DriverFlags::default(), |_| 1.0),
            terminal.clone(),
            1.0,
        )
        .unwrap();
        let p2 = ProblemSpec::new(
            grid.clone(),
            delays,
            levy,
            1,
            Driver::zero(),
            terminal,
            1.0,
        )
        .unwrap();
        let pair = ComparisonProblem::new(p1, p2).unwrap();
        let est = CondExpEstimator::default();
        let report =
            compare_direct(&pair, &ensemble, &est, &PicardConfig::default()).unwrap();
        assert!(report.pass, "violations {}", report.violation_fraction);
        // Gap is T - t.
        let gap0 = report.mean_gap[0];
        assert!((gap0 - 0.5).abs() < 1e-9, "gap at 0 = {gap0}");
    }

    #[test]
    fn identical_problems_give_bitwise_zero_gap() {
        let n = 1000;
        let (grid, delays, levy, ensemble) = setup(n);
        let terminal = TerminalData::build(
            &grid,
            n,
            1,
            0,
            |i, p| 1.0 + 0.3 * ensemble.brownian_at(p, i, 0),
            |_, _, _| 0.3,
            |_, _, _| 0.0,
        )
        .unwrap();
        let make = || {
            ProblemSpec::new(
                grid.clone(),
                delays.clone(),
                levy.clone(),
                1,
                Driver::new(mf_flags(), |args: &DriverArgs| args.law.mean()[0]),
                terminal.clone(),
                1.0,
            )
            .unwrap()
        };
        let pair = ComparisonProblem::new(make(), make()).unwrap();
        let est = CondExpEstimator::default();
        let report =
            compare_direct(&pair, &ensemble, &est, &PicardConfig::default()).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_gap_reversal, 0.0);
        for g in &report.mean_gap {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn reversed_terminal_ordering_rejected() {
        let n = 64;
        let (grid, delays, levy, _) = setup(n);
        let t1 = TerminalData::constant(&grid, n, 1, 0, 0.0).unwrap();
        let t2 = TerminalData::constant(&grid, n, 1, 0, 1.0).unwrap();
        let p1 = ProblemSpec::new(
            grid.clone(),
            delays.clone(),
            levy.clone(),
            1,
            Driver::new(DriverFlags::default(), |_| 1.0),
            t1,
            1.0,
        )
        .unwrap();
        let p2 =
            ProblemSpec::new(grid, delays, levy, 1, Driver::zero(), t2, 1.0).unwrap();
        assert!(ComparisonProblem::new(p1, p2).is_err());
    }

    #[test]
    fn decreasing_law_dependence_rejected() {
        let n = 64;
        let (grid, delays, levy, _) = setup(n);
        let terminal = TerminalData::constant(&grid, n, 1, 0, 0.0).unwrap();
        // Driver 1 decreasing in the law mean: sensitivity probe must fail.
        let p1 = ProblemSpec::new(
            grid.clone(),
            delays.clone(),
            levy.clone(),
            1,
            Driver::new(mf_flags(), |args: &DriverArgs| 1.0 - 0.5 * args.law.mean()[0]),
            terminal.clone(),
            1.0,
        )
        .unwrap();
        let p2 = ProblemSpec::new(
            grid,
            delays,
            levy,
            1,
            Driver::new(mf_flags(), |args: &DriverArgs| -0.5 * args.law.mean()[0] - 1.0),
            terminal,
            1.0,
        )
        .unwrap();
        assert!(ComparisonProblem::new(p1, p2).is_err());
    }

    #[test]
    fn chain_is_constant_for_input_free_driver() {
        let n = 512;
        let grid = build_grid(0.5, 0.25, 30).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.25));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 22).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 1.0).unwrap();
        let problem2 = ProblemSpec::new(
            grid.clone(),
            delays.clone(),
            levy.clone(),
            1,
            Driver::zero(),
            terminal.clone(),
            1.0,
        )
        .unwrap();
        // Upper solution: driver 1 = 1 (constant), solved directly.
        let problem1 = ProblemSpec::new(
            grid,
            delays,
            levy,
            1,
            Driver::new(DriverFlags::default(), |_| 1.0),
            terminal,
            1.0,
        )
        .unwrap();
        let est = CondExpEstimator::default();
        let config = PicardConfig::default();
        let (f1, _) = picard_solve(&problem1, &ensemble, &est, &config).unwrap();
        let report =
            monotone_iteration(&problem2, &f1, &ensemble, &est, &config, 4).unwrap();
        assert!(report.pass, "{report:?}");
        // All stages identical: zero differences.
        for d in &report.diff_norms {
            assert_eq!(*d, 0.0);
        }
        assert!(report.limit_sup_gap <= report.tol_band);
    }
}
