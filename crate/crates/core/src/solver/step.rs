//! One backward Euler step and the anticipated-term projections.
//!
//! At step `i` the triple is extracted from the next-step value by the
//! discrete martingale-representation regressions
//!
//! ```text
//! Z_i  = E_i[ Y_{i+1} dW_i ] / dt          (per coordinate)
//! K_ij = E_i[ Y_{i+1} (dN_ij - lambda_j dt) ] / (lambda_j dt)
//! Y_i  = E_i[Y_{i+1}] + f(t_i, E_i[Y_{i+1}], Z_i, frozen args) dt
//! ```
//!
//! with `E_i` the regression projection onto the time-`t_i` state. The
//! anticipated arguments fed to the driver are projections of the future
//! values of the previous iterate, never the raw pathwise values.

use super::condexp::{CondExpEstimator, StepRegression};
use super::{DriverArgs, DriverFlags, LawMarginal, ProblemSpec, SolutionField};
use crate::error::{Error, Result};
use crate::lattice::{shifted_index, DelayComponent, DelaySpec};
use crate::measure::EmpiricalMeasure;
use crate::noise::PathEnsemble;

/// Per-particle anticipated arguments at one grid time: one-point
/// projections and discounted window averages of the previous iterate.
#[derive(Debug, Clone)]
pub struct AnticipatedSlice {
    pub a: Vec<f64>,
    /// Flat `[p][c]`.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub a_bar: Vec<f64>,
    /// Flat `[p][c]`.
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

impl AnticipatedSlice {
    fn zeros(n: usize, d: usize) -> Self {
        AnticipatedSlice {
            a: vec![0.0; n],
            b: vec![0.0; n * d],
            c: vec![0.0; n],
            a_bar: vec![0.0; n],
            b_bar: vec![0.0; n * d],
            c_bar: vec![0.0; n],
        }
    }
}

/// Frozen per-particle inputs of one backward step: the previous iterate's
/// weighted jump coefficient, its anticipated projections, and its law.
pub struct StepFrozen<'a> {
    pub gamma: &'a [f64],
    pub a: &'a [f64],
    /// Flat `[p][c]`.
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub a_bar: &'a [f64],
    /// Flat `[p][c]`.
    pub b_bar: &'a [f64],
    pub c_bar: &'a [f64],
    pub law: &'a EmpiricalMeasure,
}

/// Output of one backward step, per particle.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub y: Vec<f64>,
    /// Flat `[p][c]`.
    pub z: Vec<f64>,
    /// Flat `[p][j]`.
    pub k: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Discounted trapezoidal window sum of a grid function of the previous
/// iterate: `integral_0^{delta(t_i)} e^{-rho s} x_{t_i + s} ds`, with the
/// upper limit snapped to the grid.
fn window_average<G>(
    n: usize,
    i: usize,
    end: usize,
    rho: f64,
    dt: f64,
    value: G,
) -> Vec<f64>
where
    G: Fn(usize, usize) -> f64,
{
    let mut out = vec![0.0; n];
    let span = end - i;
    if span == 0 {
        return out;
    }
    for (k, weight) in (0..=span).map(|k| {
        let w = if k == 0 || k == span { 0.5 } else { 1.0 };
        (k, w * dt * (-rho * k as f64 * dt).exp())
    }) {
        for (p, slot) in out.iter_mut().enumerate() {
            *slot += weight * value(i + k, p);
        }
    }
    out
}

/// Anticipated arguments at step `i`, computed from the previous iterate
/// and projected on the time-`t_i` state. Only the slots marked used by
/// `flags` are filled; the rest stay zero.
pub(super) fn anticipated_terms_with(
    prev: &SolutionField,
    reg: &StepRegression,
    ensemble: &PathEnsemble,
    delays: &DelaySpec,
    i: usize,
    flags: &DriverFlags,
) -> AnticipatedSlice {
    let grid = ensemble.grid();
    let n = prev.n_particles();
    let d = prev.brownian_dim();
    let dt = grid.dt();
    let rho = delays.rho;
    let mut slice = AnticipatedSlice::zeros(n, d);

    let shift1 = shifted_index(grid, i, delays.component(DelayComponent::Delta1));
    let shift2 = shifted_index(grid, i, delays.component(DelayComponent::Delta2));
    let shift3 = shifted_index(grid, i, delays.component(DelayComponent::Delta3));

    if flags.uses_a {
        reg.fit_into(prev.y_at(shift1), &mut slice.a);
    }
    if flags.uses_b {
        let mut target = vec![0.0; n];
        let mut fitted = vec![0.0; n];
        for c in 0..d {
            for p in 0..n {
                target[p] = prev.z(shift2, p, c);
            }
            reg.fit_into(&target, &mut fitted);
            for p in 0..n {
                slice.b[p * d + c] = fitted[p];
            }
        }
    }
    if flags.uses_c {
        reg.fit_into(prev.gamma_at(shift3), &mut slice.c);
    }
    if flags.uses_a_bar {
        let win = window_average(n, i, shift1, rho, dt, |idx, p| prev.y(idx, p));
        reg.fit_into(&win, &mut slice.a_bar);
    }
    if flags.uses_b_bar {
        let mut fitted = vec![0.0; n];
        for c in 0..d {
            let win = window_average(n, i, shift2, rho, dt, |idx, p| prev.z(idx, p, c));
            reg.fit_into(&win, &mut fitted);
            for p in 0..n {
                slice.b_bar[p * d + c] = fitted[p];
            }
        }
    }
    if flags.uses_c_bar {
        let win = window_average(n, i, shift3, rho, dt, |idx, p| prev.gamma(idx, p));
        reg.fit_into(&win, &mut slice.c_bar);
    }
    slice
}

/// Anticipated arguments at step `i` with every slot computed.
pub fn anticipated_terms(
    prev: &SolutionField,
    estimator: &CondExpEstimator,
    ensemble: &PathEnsemble,
    delays: &DelaySpec,
    i: usize,
) -> AnticipatedSlice {
    let all = DriverFlags {
        uses_a: true,
        uses_b: true,
        uses_c: true,
        uses_a_bar: true,
        uses_b_bar: true,
        uses_c_bar: true,
        ..Default::default()
    };
    let reg = estimator.at_step(ensemble, i);
    anticipated_terms_with(prev, &reg, ensemble, delays, i, &all)
}

pub(super) fn bsde_step_with(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    reg: &StepRegression,
    i: usize,
    next_y: &[f64],
    frozen: &StepFrozen<'_>,
) -> Result<StepOutput> {
    let n = ensemble.n_particles();
    let d = problem.d;
    let m = problem.levy.n_marks();
    let dt = problem.grid.dt();
    let t = problem.grid.time(i);

    let y_hat = reg.fit(next_y);

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
    }

    let mut gamma = vec![0.0; n];
    for p in 0..n {
        let mut g = 0.0;
        for j in 0..m {
            g += k[p * m + j] * problem.levy.weight(j) * problem.levy.intensity(j);
        }
        gamma[p] = g;
    }

    let mut y = vec![0.0; n];
    for p in 0..n {
        let args = DriverArgs {
            t,
            y: y_hat[p],
            z: &z[p * d..(p + 1) * d],
            gamma: frozen.gamma[p],
            a: frozen.a[p],
            b: &frozen.b[p * d..(p + 1) * d],
            c: frozen.c[p],
            a_bar: frozen.a_bar[p],
            b_bar: &frozen.b_bar[p * d..(p + 1) * d],
            c_bar: frozen.c_bar[p],
            law: frozen.law,
        };
        let f = problem.driver.eval(&args);
        if !f.is_finite() {
            return Err(Error::NonFiniteDriver {
                t,
                step: i,
                particle: p,
            });
        }
        y[p] = y_hat[p] + f * dt;
    }

    Ok(StepOutput { y, z, k, gamma })
}

/// One explicit backward Euler step with regression conditional
/// expectations; the frozen inputs come from the previous fixed-point
/// iterate.
pub fn bsde_step(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    estimator: &CondExpEstimator,
    i: usize,
    next_y: &[f64],
    frozen: &StepFrozen<'_>,
) -> Result<StepOutput> {
    if i >= problem.grid.horizon_index() {
        return Err(Error::Problem(format!(
            "backward step index {i} must be below the horizon index {}",
            problem.grid.horizon_index()
        )));
    }
    let reg = estimator.at_step(ensemble, i);
    bsde_step_with(problem, ensemble, &reg, i, next_y, frozen)
}

/// Law cloud of a field at one grid time, with the marginal requested by
/// the driver flags.
pub(super) fn law_cloud(field: &SolutionField, i: usize, law: LawMarginal) -> EmpiricalMeasure {
    let n = field.n_particles();
    match law {
        LawMarginal::YOnly => EmpiricalMeasure::new(1, field.y_at(i).to_vec())
            .expect("solution values stay finite"),
        LawMarginal::Full => {
            let d = field.brownian_dim();
            let dim = 1 + d + 1;
            let mut samples = vec![0.0; n * dim];
            for p in 0..n {
                samples[p * dim] = field.y(i, p);
                for c in 0..d {
                    samples[p * dim + 1 + c] = field.z(i, p, c);
                }
                samples[p * dim + 1 + d] = field.gamma(i, p);
            }
            EmpiricalMeasure::new(dim, samples).expect("solution values stay finite")
        }
    }
}
