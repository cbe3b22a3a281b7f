//! Fixed-point loops: the full anticipated sweep and the single-sweep
//! mean-field solver used by the comparison harness.

use super::condexp::CondExpEstimator;
use super::step::{anticipated_terms_with, bsde_step_with, law_cloud, StepFrozen};
use super::{DriverArgs, PicardConfig, ProblemSpec, SolutionField};
use crate::analysis::beta_norm_diff;
use crate::error::{Error, Result};
use crate::lattice::DelaySpec;
use crate::measure::EmpiricalMeasure;
use crate::noise::PathEnsemble;

/// Record of one fixed-point run: the weighted norm of each successive
/// difference and whether the stopping rule fired.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub beta: f64,
    pub diff_norms: Vec<f64>,
    pub converged: bool,
}

impl IterationTrace {
    /// Ratios of successive difference norms.
    pub fn ratios(&self) -> Vec<f64> {
        self.diff_norms
            .windows(2)
            .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
            .collect()
    }
}

fn check_shapes(problem: &ProblemSpec, ensemble: &PathEnsemble) -> Result<()> {
    if ensemble.grid() != &problem.grid {
        return Err(Error::Problem("ensemble grid differs from problem grid".into()));
    }
    if ensemble.levy() != &problem.levy {
        return Err(Error::Problem("ensemble jump model differs from problem".into()));
    }
    if ensemble.brownian_dim() != problem.d {
        return Err(Error::Problem(format!(
            "ensemble Brownian dimension {} differs from problem dimension {}",
            ensemble.brownian_dim(),
            problem.d
        )));
    }
    if problem.terminal.n_particles() != ensemble.n_particles() {
        return Err(Error::Problem(format!(
            "terminal data has {} particles, ensemble has {}",
            problem.terminal.n_particles(),
            ensemble.n_particles()
        )));
    }
    Ok(())
}

/// Solve the anticipated equation by iterating the frozen-input map.
///
/// From iterate `k`, the anticipated projections, the weighted jump
/// coefficient, and the law clouds are computed from iterate `k`; one
/// backward sweep then produces iterate `k+1`. The initial iterate is
/// identically zero before the horizon, extended by the terminal data.
/// Iteration stops when the weighted norm of the difference drops below
/// `config.tol`; running out of iterations flags the trace as not
/// converged rather than failing.
pub fn picard_solve(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    estimator: &CondExpEstimator,
    config: &PicardConfig,
) -> Result<(SolutionField, IterationTrace)> {
    config.validate()?;
    check_shapes(problem, ensemble)?;
    let grid = &problem.grid;
    let n = ensemble.n_particles();
    let d = problem.d;
    let n_horizon = grid.horizon_index();
    let flags = problem.driver.flags;
    let dirac = EmpiricalMeasure::dirac_zero(if flags.uses_law { 1 } else { 1 });

    let mut prev = SolutionField::with_terminal(grid, &problem.levy, &problem.terminal);
    let mut trace = IterationTrace {
        beta: config.beta,
        diff_norms: Vec::new(),
        converged: false,
    };

    for _ in 0..config.max_iter {
        let mut next = SolutionField::with_terminal(grid, &problem.levy, &problem.terminal);
        for i in (0..n_horizon).rev() {
            let reg = estimator.at_step(ensemble, i);
            let anticipated =
                anticipated_terms_with(&prev, &reg, ensemble, &problem.delays, i, &flags);
            let law = if flags.uses_law {
                law_cloud(&prev, i, flags.law_marginal)
            } else {
                dirac.clone()
            };
            let next_y = next.y_at(i + 1).to_vec();
            let frozen = StepFrozen {
                gamma: prev.gamma_at(i),
                a: &anticipated.a,
                b: &anticipated.b,
                c: &anticipated.c,
                a_bar: &anticipated.a_bar,
                b_bar: &anticipated.b_bar,
                c_bar: &anticipated.c_bar,
                law: &law,
            };
            let out = bsde_step_with(problem, ensemble, &reg, i, &next_y, &frozen)?;
            let lambda = config.damping;
            for p in 0..n {
                let y = lambda * out.y[p] + (1.0 - lambda) * prev.y(i, p);
                next.set_y(i, p, y);
                for c in 0..d {
                    let z = lambda * out.z[p * d + c] + (1.0 - lambda) * prev.z(i, p, c);
                    next.set_z(i, p, c, z);
                }
                let mut g = 0.0;
                for j in 0..problem.levy.n_marks() {
                    let m = problem.levy.n_marks();
                    let kv = lambda * out.k[p * m + j] + (1.0 - lambda) * prev.k(i, p, j);
                    next.set_k(i, p, j, kv);
                    g += kv * problem.levy.weight(j) * problem.levy.intensity(j);
                }
                next.set_gamma(i, p, g);
            }
        }
        let diff = beta_norm_diff(&next, &prev, &problem.levy, config.beta, grid);
        trace.diff_norms.push(diff);
        prev = next;
        if diff < config.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((prev, trace))
}

/// Externally supplied anticipated inputs for the monotone chain: the
/// one-point and window projections of a previously solved field, per
/// grid step before the horizon and per particle.
#[derive(Debug, Clone)]
pub struct FrozenAnticipated {
    n_particles: usize,
    /// Flat `[i][p]`, `i < horizon_index`.
    pub a: Vec<f64>,
    /// Flat `[i][p]`.
    pub a_bar: Vec<f64>,
}

impl FrozenAnticipated {
    /// Project the future `Y` of `source` (one-point and discounted
    /// window, first delay component) onto each pre-horizon time.
    pub fn from_solution(
        source: &SolutionField,
        estimator: &CondExpEstimator,
        ensemble: &PathEnsemble,
        delays: &DelaySpec,
    ) -> Self {
        let grid = ensemble.grid();
        let n = source.n_particles();
        let n_horizon = grid.horizon_index();
        let mut a = vec![0.0; n_horizon * n];
        let mut a_bar = vec![0.0; n_horizon * n];
        let flags = super::DriverFlags {
            uses_a: true,
            uses_a_bar: true,
            ..Default::default()
        };
        for i in 0..n_horizon {
            let reg = estimator.at_step(ensemble, i);
            let slice = anticipated_terms_with(source, &reg, ensemble, delays, i, &flags);
            a[i * n..(i + 1) * n].copy_from_slice(&slice.a);
            a_bar[i * n..(i + 1) * n].copy_from_slice(&slice.a_bar);
        }
        FrozenAnticipated {
            n_particles: n,
            a,
            a_bar,
        }
    }

    fn a_at(&self, i: usize) -> &[f64] {
        &self.a[i * self.n_particles..(i + 1) * self.n_particles]
    }

    fn a_bar_at(&self, i: usize) -> &[f64] {
        &self.a_bar[i * self.n_particles..(i + 1) * self.n_particles]
    }
}

/// Number of in-sweep law refreshes per step of [`solve_mf_bsde`].
const LAW_REFRESHES: usize = 2;

/// Solve a mean-field equation (driver restricted to
/// `f(t, y, z, gamma, a, a_bar, law-of-Y)`) in a single backward sweep.
///
/// The law cloud is refreshed within the sweep from the current estimate
/// of `Y_i`, so no outer fixed-point loop is needed. Anticipated slots are
/// either unused or filled from the supplied frozen projections.
pub fn solve_mf_bsde(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    estimator: &CondExpEstimator,
    config: &PicardConfig,
    frozen: Option<&FrozenAnticipated>,
) -> Result<SolutionField> {
    config.validate()?;
    check_shapes(problem, ensemble)?;
    let flags = problem.driver.flags;
    if !flags.is_restricted() {
        return Err(Error::Problem(
            "mean-field sweep requires the restricted driver signature (no anticipated Z or gamma slots, scalar law)".into(),
        ));
    }
    if frozen.is_none() && flags.uses_any_anticipated() {
        return Err(Error::Problem(
            "driver reads anticipated arguments but no frozen projections were supplied".into(),
        ));
    }

    let grid = &problem.grid;
    let n = ensemble.n_particles();
    let d = problem.d;
    let m = problem.levy.n_marks();
    let dt = grid.dt();
    let n_horizon = grid.horizon_index();
    let zeros = vec![0.0; n];
    let zeros_d = vec![0.0; n * d];
    let dirac = EmpiricalMeasure::dirac_zero(1);

    let mut field = SolutionField::with_terminal(grid, &problem.levy, &problem.terminal);
    for i in (0..n_horizon).rev() {
        let reg = estimator.at_step(ensemble, i);
        let next_y = field.y_at(i + 1).to_vec();
        let y_hat = reg.fit(&next_y);

        let mut z = vec![0.0; n * d];
        {
            let mut target = vec![0.0; n];
            let mut fitted = vec![0.0; n];
            for c in 0..d {
                for p in 0..n {
                    target[p] = next_y[p] * ensemble.dw(p, i, c) / dt;
                }
                reg.fit_into(&target, &mut fitted);
                for p in 0..n {
                    z[p * d + c] = fitted[p];
                }
            }
        }
        let mut k = vec![0.0; n * m];
        let mut gamma = vec![0.0; n];
        {
            let mut target = vec![0.0; n];
            let mut fitted = vec![0.0; n];
            for j in 0..m {
                let lam_dt = problem.levy.intensity(j) * dt;
                for p in 0..n {
                    target[p] = next_y[p] * ensemble.compensated_increment(p, i, j) / lam_dt;
                }
                reg.fit_into(&target, &mut fitted);
                for p in 0..n {
                    k[p * m + j] = fitted[p];
                }
            }
            for p in 0..n {
                let mut g = 0.0;
                for j in 0..m {
                    g += k[p * m + j] * problem.levy.weight(j) * problem.levy.intensity(j);
                }
                gamma[p] = g;
            }
        }

        let a = frozen.map_or(zeros.as_slice(), |f| f.a_at(i));
        let a_bar = frozen.map_or(zeros.as_slice(), |f| f.a_bar_at(i));
        let t = grid.time(i);

        let eval_sweep = |law: &EmpiricalMeasure, y_out: &mut Vec<f64>| -> Result<()> {
            for p in 0..n {
                let args = DriverArgs {
                    t,
                    y: y_hat[p],
                    z: &z[p * d..(p + 1) * d],
                    gamma: gamma[p],
                    a: a[p],
                    b: &zeros_d[..d],
                    c: 0.0,
                    a_bar: a_bar[p],
                    b_bar: &zeros_d[..d],
                    c_bar: 0.0,
                    law,
                };
                let f = problem.driver.eval(&args);
                if !f.is_finite() {
                    return Err(Error::NonFiniteDriver {
                        t,
                        step: i,
                        particle: p,
                    });
                }
                y_out[p] = y_hat[p] + f * dt;
            }
            Ok(())
        };

        let mut y = vec![0.0; n];
        if flags.uses_law {
            let mut law = EmpiricalMeasure::new(1, y_hat.clone())
                .map_err(|_| Error::Problem("non-finite solution values in law cloud".into()))?;
            for _ in 0..LAW_REFRESHES {
                eval_sweep(&law, &mut y)?;
                law = EmpiricalMeasure::new(1, y.clone())
                    .map_err(|_| Error::Problem("non-finite solution values in law cloud".into()))?;
            }
        } else {
            eval_sweep(&dirac, &mut y)?;
        }

        for p in 0..n {
            field.set_y(i, p, y[p]);
            for c in 0..d {
                field.set_z(i, p, c, z[p * d + c]);
            }
            for j in 0..m {
                field.set_k(i, p, j, k[p * m + j]);
            }
            field.set_gamma(i, p, gamma[p]);
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_grid, DelayFn};
    use crate::noise::{simulate_ensemble, LevyModel};
    use crate::solver::{Driver, DriverFlags, LawMarginal, TerminalData};

    fn config() -> PicardConfig {
        PicardConfig {
            beta: 0.0,
            tol: 1e-10,
            max_iter: 20,
            damping: 1.0,
        }
    }

    #[test]
    fn zero_driver_constant_terminal_fixed_point() {
        let n = 512;
        let grid = build_grid(0.5, 0.25, 30).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.25));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 1).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 4.5).unwrap();
        let problem =
            ProblemSpec::new(grid.clone(), delays, levy, 1, Driver::zero(), terminal, 1.0)
                .unwrap();
        let est = CondExpEstimator::default();
        let (field, trace) = picard_solve(&problem, &ensemble, &est, &config()).unwrap();
        assert!(trace.converged);
        assert!(trace.diff_norms.len() <= 2, "{:?}", trace.diff_norms);
        for i in 0..grid.n_times() {
            for p in 0..n {
                assert!((field.y(i, p) - 4.5).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_driver_linear_in_time() {
        let n = 256;
        let grid = build_grid(1.0, 0.0, 40).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 2).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 0.0).unwrap();
        let c = 0.8;
        let driver = Driver::new(DriverFlags::default(), move |_| c);
        let problem =
            ProblemSpec::new(grid.clone(), delays, levy, 1, driver, terminal, 1.0).unwrap();
        let est = CondExpEstimator::default();
        let (field, trace) = picard_solve(&problem, &ensemble, &est, &config()).unwrap();
        assert!(trace.converged);
        // The map ignores its input here, so the second difference is zero.
        assert_eq!(trace.diff_norms.len(), 2);
        assert_eq!(trace.diff_norms[1], 0.0);
        for i in 0..=grid.horizon_index() {
            let expect = c * (grid.horizon() - grid.time(i));
            for p in 0..n {
                assert!(
                    (field.y(i, p) - expect).abs() < 1e-10,
                    "Y({i},{p}) = {} vs {expect}",
                    field.y(i, p)
                );
            }
        }
    }

    #[test]
    fn one_point_anticipated_matches_quadrature_recursion() {
        let n = 256;
        // T = 0.5, M = 0.25, delta = 0.25.
        let grid = build_grid(0.5, 0.25, 60).unwrap();
        let delta = 0.25;
        let delays = DelaySpec::uniform(DelayFn::Constant(delta));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 3).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 1.0).unwrap();
        let flags = DriverFlags {
            uses_a: true,
            ..Default::default()
        };
        let driver = Driver::new(flags, |args| args.a);
        let problem =
            ProblemSpec::new(grid.clone(), delays.clone(), levy, 1, driver, terminal, 1.0)
                .unwrap();
        let est = CondExpEstimator::default();
        let (field, trace) = picard_solve(&problem, &ensemble, &est, &config()).unwrap();
        assert!(trace.converged);

        // Independent oracle: scalar backward recursion y_i = y_{i+1} +
        // y_{i + shift} dt on the same grid.
        let dt = grid.dt();
        let shift = (delta / dt).round() as usize;
        let mut oracle = vec![1.0; grid.n_times()];
        for i in (0..grid.horizon_index()).rev() {
            oracle[i] = oracle[i + 1] + oracle[i + shift] * dt;
        }
        for i in 0..=grid.horizon_index() {
            for p in 0..n {
                assert!(
                    (field.y(i, p) - oracle[i]).abs() < 1e-9,
                    "Y({i}) = {} vs oracle {}",
                    field.y(i, p),
                    oracle[i]
                );
            }
        }

        // Closed form of the continuous equation, piecewise polynomial.
        let t_hor = grid.horizon();
        for i in 0..=grid.horizon_index() {
            let t = grid.time(i);
            let expect = if t >= t_hor - delta {
                1.0 + (t_hor - t)
            } else {
                let u = t_hor - delta - t;
                1.0 + delta + u + u * u / 2.0
            };
            assert!(
                (field.y(i, 0) - expect).abs() <= 5.0 * dt,
                "t = {t}: Y = {} vs closed form {expect}",
                field.y(i, 0)
            );
        }
    }

    #[test]
    fn non_convergent_run_is_flagged_not_an_error() {
        let n = 128;
        let grid = build_grid(0.5, 0.25, 15).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.25));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 4).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 1.0).unwrap();
        let flags = DriverFlags {
            uses_a: true,
            ..Default::default()
        };
        let driver = Driver::new(flags, |args| args.a);
        let problem =
            ProblemSpec::new(grid, delays, levy, 1, driver, terminal, 1.0).unwrap();
        let est = CondExpEstimator::default();
        let tight = PicardConfig {
            max_iter: 1,
            tol: 1e-14,
            ..config()
        };
        let (_, trace) = picard_solve(&problem, &ensemble, &est, &tight).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.diff_norms.len(), 1);
    }

    #[test]
    fn mean_field_linear_mean_matches_exponential_ode() {
        let n = 20_000;
        let grid = build_grid(1.0, 0.0, 200).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 5).unwrap();
        // Terminal xi = 1 + 0.25 W_T, E[xi] = 1.
        let terminal = TerminalData::build(
            &grid,
            n,
            1,
            0,
            |i, p| 1.0 + 0.25 * ensemble.brownian_at(p, i, 0),
            |_, _, _| 0.25,
            |_, _, _| 0.0,
        )
        .unwrap();
        let flags = DriverFlags {
            uses_law: true,
            law_marginal: LawMarginal::YOnly,
            ..Default::default()
        };
        let driver = Driver::new(flags, |args| args.law.mean()[0]);
        let problem =
            ProblemSpec::new(grid.clone(), delays, levy, 1, driver, terminal, 1.0).unwrap();
        let est = CondExpEstimator::default();
        let field = solve_mf_bsde(&problem, &ensemble, &est, &config(), None).unwrap();
        let mean_y0 = field.y_at(0).iter().sum::<f64>() / n as f64;
        let expect = 1.0f64.exp();
        assert!(
            (mean_y0 - expect).abs() / expect < 0.02,
            "E[Y_0] = {mean_y0} vs e = {expect}"
        );
    }

    #[test]
    fn compensated_jump_terminal_recovers_weights() {
        let n = 20_000;
        let grid = build_grid(1.0, 0.0, 200).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::new(vec![1.0], vec![2.0], vec![0.5], 1.0).unwrap();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 6).unwrap();
        let terminal = TerminalData::build(
            &grid,
            n,
            1,
            1,
            |i, p| ensemble.jump_value_at(p, i),
            |_, _, _| 0.0,
            |_, _, j| [0.5][j],
        )
        .unwrap();
        let problem = ProblemSpec::new(
            grid.clone(),
            delays,
            levy,
            1,
            Driver::zero(),
            terminal,
            1.0,
        )
        .unwrap();
        let est = CondExpEstimator::default();
        let field = solve_mf_bsde(&problem, &ensemble, &est, &config(), None).unwrap();
        // Time-and-particle average of the regressed K per mark.
        let mut k_mean = 0.0;
        let steps = grid.horizon_index();
        for i in 0..steps {
            for p in 0..n {
                k_mean += field.k(i, p, 0);
            }
        }
        k_mean /= (steps * n) as f64;
        assert!(
            (k_mean - 0.5).abs() / 0.5 < 0.05,
            "mean K = {k_mean} vs weight 0.5"
        );
        // Z stays near zero.
        let mut z_mean = 0.0;
        for i in 0..steps {
            for p in 0..n {
                z_mean += field.z(i, p, 0);
            }
        }
        z_mean /= (steps * n) as f64;
        assert!(z_mean.abs() < 0.05, "mean Z = {z_mean}");
    }

    #[test]
    fn deterministic_terminal_propagates_unchanged() {
        let n = 256;
        let grid = build_grid(0.5, 0.0, 25).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 7).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 2.25).unwrap();
        let problem = ProblemSpec::new(
            grid.clone(),
            delays,
            levy,
            1,
            Driver::zero(),
            terminal,
            1.0,
        )
        .unwrap();
        let est = CondExpEstimator::default();
        let field = solve_mf_bsde(&problem, &ensemble, &est, &config(), None).unwrap();
        for i in 0..grid.n_times() {
            for p in 0..n {
                assert!((field.y(i, p) - 2.25).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mf_sweep_rejects_unrestricted_driver() {
        let n = 128;
        let grid = build_grid(0.5, 0.0, 10).unwrap();
        let delays = DelaySpec::uniform(DelayFn::Constant(0.0));
        let levy = LevyModel::none();
        let ensemble = simulate_ensemble(&grid, &levy, 1, n, 8).unwrap();
        let terminal = TerminalData::constant(&grid, n, 1, 0, 0.0).unwrap();
        let flags = DriverFlags {
            uses_b: true,
            ..Default::default()
        };
        let driver = Driver::new(flags, |args| args.b[0]);
        let problem = ProblemSpec::new(grid, delays, levy, 1, driver, terminal, 1.0).unwrap();
        let est = CondExpEstimator::default();
        assert!(solve_mf_bsde(&problem, &ensemble, &est, &config(), None).is_err());
    }
}
