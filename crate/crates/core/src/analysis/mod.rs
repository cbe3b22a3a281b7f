//! Verification instruments: the exponentially weighted norm, the
//! implicit weight selector, contraction diagnostics, and the a priori
//! energy bound.

mod compare;

pub use compare::{
    compare_direct, monotone_iteration, ComparisonProblem, ComparisonReport, MonotoneReport,
};

use crate::lattice::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::noise::LevyModel;
use crate::solver::{DriverArgs, IterationTrace, LawMarginal, ProblemSpec, SolutionField};

/// Discrete weighted norm of a solution-shaped triple:
///
/// ```text
/// sum_i e^{beta t_i} mean_p( y^2 + |z|^2 + sum_j k_j^2 lambda_j ) dt
/// ```
///
/// by rectangle rule over the whole grid `[0, T+M]`.
pub fn beta_norm(field: &SolutionField, levy: &LevyModel, beta: f64, grid: &TimeGrid) -> f64 {
    let n = field.n_particles() as f64;
    let d = field.brownian_dim();
    let m = field.n_marks();
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..grid.last_index() {
        let mut acc = 0.0;
        for p in 0..field.n_particles() {
            let y = field.y(i, p);
            acc += y * y;
            for c in 0..d {
                let z = field.z(i, p, c);
                acc += z * z;
            }
            for j in 0..m {
                let k = field.k(i, p, j);
                acc += k * k * levy.intensity(j);
            }
        }
        total += (beta * grid.time(i)).exp() * acc / n * dt;
    }
    total
}

/// Weighted norm of the difference of two fields without materializing it.
pub fn beta_norm_diff(
    a: &SolutionField,
    b: &SolutionField,
    levy: &LevyModel,
    beta: f64,
    grid: &TimeGrid,
) -> f64 {
    let n = a.n_particles() as f64;
    let d = a.brownian_dim();
    let m = a.n_marks();
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..grid.last_index() {
        let mut acc = 0.0;
        for p in 0..a.n_particles() {
            let y = a.y(i, p) - b.y(i, p);
            acc += y * y;
            for c in 0..d {
                let z = a.z(i, p, c) - b.z(i, p, c);
                acc += z * z;
            }
            for j in 0..m {
                let k = a.k(i, p, j) - b.k(i, p, j);
                acc += k * k * levy.intensity(j);
            }
        }
        total += (beta * grid.time(i)).exp() * acc / n * dt;
    }
    total
}

/// Upper end of the bisection bracket for the weight equation.
pub const BETA_CAP: f64 = 200.0;
/// Residual demanded of a reported root.
pub const BETA_RESIDUAL_TOL: f64 = 1e-9;

/// Outcome of [`select_beta`].
#[derive(Debug, Clone)]
pub enum BetaSelection {
    Solved {
        beta: f64,
        /// `beta - rhs(beta)` at the reported root.
        residual: f64,
    },
    /// The equation has no root below [`BETA_CAP`] (the exponential term
    /// outgrows the identity); the sampled gap curve is returned for
    /// diagnostics.
    NoSolution {
        beta_cap: f64,
        /// Samples of `(beta, beta - rhs(beta))`.
        curve: Vec<(f64, f64)>,
    },
}

impl BetaSelection {
    pub fn beta(&self) -> Option<f64> {
        match self {
            BetaSelection::Solved { beta, .. } => Some(*beta),
            BetaSelection::NoSolution { .. } => None,
        }
    }
}

/// Solve the implicit weight equation
///
/// ```text
/// beta = 40 C^2 (2 + (1 + I2)(L + C_TM e^{beta T} T)) + 2,
/// C_TM = (1 - e^{-2 rho (T+M)}) / (2 rho),  I2 = sum_j l_j^2 lambda_j
/// ```
///
/// for its smallest root by scan-and-bisect on `[2, BETA_CAP]`.
pub fn select_beta(
    lipschitz_c: f64,
    l_constant: f64,
    levy: &LevyModel,
    rho: f64,
    horizon: f64,
    window: f64,
) -> BetaSelection {
    let i2 = levy.weight_sq_intensity();
    let c_tm = (1.0 - (-2.0 * rho * (horizon + window)).exp()) / (2.0 * rho);
    let c2 = lipschitz_c * lipschitz_c;
    let rhs = move |beta: f64| -> f64 {
        40.0 * c2 * (2.0 + (1.0 + i2) * (l_constant + c_tm * (beta * horizon).exp() * horizon))
            + 2.0
    };
    if lipschitz_c == 0.0 {
        return BetaSelection::Solved {
            beta: 2.0,
            residual: 0.0,
        };
    }
    if horizon == 0.0 {
        let beta = 40.0 * c2 * (2.0 + (1.0 + i2) * l_constant) + 2.0;
        return BetaSelection::Solved {
            beta,
            residual: 0.0,
        };
    }

    let gap = |beta: f64| beta - rhs(beta);
    // gap(2) < 0 whenever C > 0; look for the first upcrossing.
    let scan_step = 0.01;
    let mut lo = 2.0;
    let mut bracket = None;
    let mut beta = 2.0 + scan_step;
    while beta <= BETA_CAP {
        if gap(beta) >= 0.0 {
            bracket = Some((lo, beta));
            break;
        }
        lo = beta;
        beta += scan_step;
    }
    let Some((mut lo, mut hi)) = bracket else {
        let curve = (0..=50)
            .map(|k| {
                let b = 2.0 + (BETA_CAP - 2.0) * k as f64 / 50.0;
                (b, gap(b))
            })
            .collect();
        return BetaSelection::NoSolution {
            beta_cap: BETA_CAP,
            curve,
        };
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-13 * hi.max(1.0) {
            break;
        }
    }
    let root = hi;
    BetaSelection::Solved {
        beta: root,
        residual: gap(root),
    }
}

/// Contraction verdict over an iteration trace.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub ratios: Vec<f64>,
    /// Geometric mean of the ratios (the fitted per-iteration factor).
    pub fitted_ratio: Option<f64>,
    pub pass: bool,
    pub note: Option<String>,
}

/// Pass threshold for the fitted ratio when the weight came from
/// [`select_beta`]: the continuous-time factor is 1/2, the slack absorbs
/// discretization and regression noise.
pub const CONTRACTION_PASS_RATIO: f64 = 0.6;

/// Analyze successive difference norms. With a selected weight the
/// geometric-mean ratio must stay below [`CONTRACTION_PASS_RATIO`]; with a
/// user-supplied weight the trace must be monotonically nonincreasing. A
/// zero difference anywhere short-circuits to a pass (exact fixed point).
pub fn contraction_report(trace: &IterationTrace, beta_selected: bool) -> ContractionReport {
    let norms = &trace.diff_norms;
    if let Some(k) = norms.iter().position(|&v| v == 0.0) {
        let ratios = norms[..k]
            .windows(2)
            .map(|w| w[1] / w[0])
            .collect();
        return ContractionReport {
            ratios,
            fitted_ratio: Some(0.0),
            pass: true,
            note: Some(format!("exact fixed point after {} iteration(s)", k + 1)),
        };
    }
    if norms.len() < 3 {
        return ContractionReport {
            ratios: Vec::new(),
            fitted_ratio: None,
            pass: false,
            note: Some(format!(
                "need at least 3 difference norms, trace has {}",
                norms.len()
            )),
        };
    }
    let ratios: Vec<f64> = norms.windows(2).map(|w| w[1] / w[0]).collect();
    let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    let fitted = log_mean.exp();
    let pass = if beta_selected {
        fitted <= CONTRACTION_PASS_RATIO
    } else {
        ratios.iter().all(|&r| r <= 1.0)
    };
    ContractionReport {
        ratios,
        fitted_ratio: Some(fitted),
        pass,
        note: None,
    }
}

/// Energy-bound surrogate: the discrete left side, the data side without
/// its constant, and their ratio.
#[derive(Debug, Clone)]
pub struct AprioriReport {
    /// `mean_p[ sup_{i<=horizon} Y^2 ] + E int_0^T (|Z|^2 + int |K|^2 lambda)`.
    pub lhs: f64,
    /// `E[phi_T^2] + E int_T^{T+M} (phi^2 + |phi_z|^2 + int psi^2 lambda)
    /// + int_0^T f(s, 0, ..., 0, dirac_0)^2 ds`.
    pub rhs_core: f64,
    /// `lhs / rhs_core`, absent when the data side is zero.
    pub ratio: Option<f64>,
    /// Zero data must force a zero solution; anything else is anomalous.
    pub anomaly: bool,
}

/// Tolerance below which a left side is considered zero in the zero-data
/// anomaly check.
const APRIORI_ZERO_TOL: f64 = 1e-12;

/// Evaluate both sides of the energy bound on a solved field.
pub fn apriori_check(problem: &ProblemSpec, solution: &SolutionField) -> AprioriReport {
    let grid = &problem.grid;
    let levy = &problem.levy;
    let n = solution.n_particles();
    let d = solution.brownian_dim();
    let m = solution.n_marks();
    let dt = grid.dt();
    let n_horizon = grid.horizon_index();

    let mut lhs = 0.0;
    for p in 0..n {
        let mut sup = 0.0f64;
        for i in 0..=n_horizon {
            sup = sup.max(solution.y(i, p) * solution.y(i, p));
        }
        let mut quad = 0.0;
        for i in 0..n_horizon {
            for c in 0..d {
                let z = solution.z(i, p, c);
                quad += z * z * dt;
            }
            for j in 0..m {
                let k = solution.k(i, p, j);
                quad += k * k * levy.intensity(j) * dt;
            }
        }
        lhs += sup + quad;
    }
    lhs /= n as f64;

    let terminal = &problem.terminal;
    let mut rhs = 0.0;
    for p in 0..n {
        let phi_t = terminal.phi(0, p);
        let mut acc = phi_t * phi_t;
        for w in 0..terminal.window_len() - 1 {
            let phi = terminal.phi(w, p);
            let mut row = phi * phi;
            for c in 0..d {
                let pz = terminal.phi_z(w, p, c);
                row += pz * pz;
            }
            for j in 0..m {
                let ps = terminal.psi(w, p, j);
                row += ps * ps * levy.intensity(j);
            }
            acc += row * dt;
        }
        rhs += acc;
    }
    rhs /= n as f64;

    // Driver at the zero arguments and the point mass at zero.
    let law_dim = match problem.driver.flags.law_marginal {
        LawMarginal::YOnly => 1,
        LawMarginal::Full => 1 + d + 1,
    };
    let dirac = EmpiricalMeasure::dirac_zero(law_dim);
    let zeros_d = vec![0.0; d];
    for i in 0..n_horizon {
        let args = DriverArgs {
            t: grid.time(i),
            y: 0.0,
            z: &zeros_d,
            gamma: 0.0,
            a: 0.0,
            b: &zeros_d,
            c: 0.0,
            a_bar: 0.0,
            b_bar: &zeros_d,
            c_bar: 0.0,
            law: &dirac,
        };
        let f0 = problem.driver.eval(&args);
        rhs += f0 * f0 * dt;
    }

    let (ratio, anomaly) = if rhs > 0.0 {
        (Some(lhs / rhs), false)
    } else {
        (None, lhs > APRIORI_ZERO_TOL)
    };
    AprioriReport {
        lhs,
        rhs_core: rhs,
        ratio,
        anomaly,
    }
}
