//! Uniform time grid over `[0, T+M]` and delay functions.
//!
//! The solver works on a uniform partition of `[0, T+M]` where `T` is the
//! horizon and `M` the length of the post-horizon window on which terminal
//! data lives. Delay functions map `[0, T]` into `[0, M + (T - t)]` so that
//! a delayed lookup `t + delta(t)` never leaves the grid; the validator
//! certifies both the pointwise bound and a substitution constant `L` with
//!
//! ```text
//! integral_t^T G(s + delta(s)) ds  <=  L * integral_t^{T+M} G(s) ds
//! ```
//!
//! for nonnegative integrands `G`.

use crate::error::{Error, Result};

/// Relative slack for deciding whether a time sits exactly on the grid.
const GRID_SNAP_TOL: f64 = 8.0 * f64::EPSILON;

/// Uniform partition of `[0, T+M]`.
///
/// Both `T` and `T+M` are required to be grid points; all index arithmetic
/// downstream (delayed lookups, terminal windows) relies on that.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    window: f64,
    dt: f64,
    n_horizon: usize,
    n_total: usize,
    times: Vec<f64>,
}

impl TimeGrid {
    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Window length `M`.
    pub fn window(&self) -> f64 {
        self.window
    }

    /// Uniform step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index of `T` on the grid.
    pub fn horizon_index(&self) -> usize {
        self.n_horizon
    }

    /// Index of `T+M`, the last grid point.
    pub fn last_index(&self) -> usize {
        self.n_total
    }

    /// Number of grid points (`last_index + 1`).
    pub fn n_times(&self) -> usize {
        self.n_total + 1
    }

    /// Time of grid point `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// All grid times.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Grid index of a time that must lie exactly on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let raw = t / self.dt;
        let idx = raw.round();
        if idx < 0.0 || idx > self.n_total as f64 {
            return Err(Error::Grid(format!(
                "time {t} outside [0, {}]",
                self.times[self.n_total]
            )));
        }
        let idx = idx as usize;
        if (idx as f64 * self.dt - t).abs() > GRID_SNAP_TOL * t.abs().max(1.0) {
            return Err(Error::Grid(format!(
                "time {t} is not a grid point (dt = {})",
                self.dt
            )));
        }
        Ok(idx)
    }

    /// Nearest grid index to an arbitrary time in `[0, T+M]`; ties round up.
    pub fn nearest_index(&self, t: f64) -> usize {
        let idx = (t / self.dt + 0.5).floor();
        (idx.max(0.0) as usize).min(self.n_total)
    }
}

/// Build a uniform grid with `n_steps_total` steps over `[0, T+M]`.
///
/// Fails unless `T` is an exact multiple of the implied `dt`
/// (up to floating-point snap tolerance).
pub fn build_grid(horizon: f64, window: f64, n_steps_total: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Grid(format!("horizon T = {horizon} must be positive")));
    }
    if !(window >= 0.0) || !window.is_finite() {
        return Err(Error::Grid(format!("window M = {window} must be nonnegative")));
    }
    if n_steps_total < 2 {
        return Err(Error::Grid(format!(
            "need at least 2 steps, got {n_steps_total}"
        )));
    }
    let total = horizon + window;
    let dt = total / n_steps_total as f64;
    let raw = horizon / dt;
    let n_horizon = raw.round() as usize;
    if n_horizon == 0
        || n_horizon > n_steps_total
        || (n_horizon as f64 * dt - horizon).abs() > GRID_SNAP_TOL * horizon.max(1.0)
    {
        return Err(Error::Grid(format!(
            "T = {horizon} does not sit on the grid: dt = {dt} puts it at fractional index {raw}"
        )));
    }
    let times = (0..=n_steps_total).map(|i| i as f64 * dt).collect();
    Ok(TimeGrid {
        horizon,
        window,
        dt,
        n_horizon,
        n_total: n_steps_total,
        times,
    })
}

/// One delay function on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayFn {
    /// `delta(t) = value`.
    Constant(f64),
    /// `delta(t) = a + b t` with slope `b > -1`.
    Affine { a: f64, b: f64 },
    /// Values per grid index of `[0, T]`, with a user-declared
    /// substitution constant (spot-checked, not derived).
    Tabulated { values: Vec<f64>, declared_l: f64 },
}

impl DelayFn {
    /// Evaluate at a grid time `t <= T`.
    pub fn eval(&self, t: f64, grid: &TimeGrid) -> f64 {
        match self {
            DelayFn::Constant(v) => *v,
            DelayFn::Affine { a, b } => a + b * t,
            DelayFn::Tabulated { values, .. } => {
                let i = grid.nearest_index(t).min(values.len().saturating_sub(1));
                values[i]
            }
        }
    }

    /// Substitution constant certified for this family, if one exists.
    ///
    /// Constant delays shift the integration variable without distortion
    /// (`L = 1`); an affine delay rescales it by `1 + b` (`L = 1/(1+b)`);
    /// tabulated delays carry whatever the user declared.
    pub fn certified_l(&self) -> Option<f64> {
        match self {
            DelayFn::Constant(_) => Some(1.0),
            DelayFn::Affine { b, .. } => {
                if *b > -1.0 {
                    Some(1.0 / (1.0 + b))
                } else {
                    None
                }
            }
            DelayFn::Tabulated { declared_l, .. } => {
                if *declared_l > 0.0 {
                    Some(*declared_l)
                } else {
                    None
                }
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            DelayFn::Constant(_) => "constant",
            DelayFn::Affine { .. } => "affine",
            DelayFn::Tabulated { .. } => "tabulated",
        }
    }
}

/// The three delay functions plus the discount rate for averaged
/// anticipated terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySpec {
    pub delta1: DelayFn,
    pub delta2: DelayFn,
    pub delta3: DelayFn,
    /// Discount rate in the exponentially weighted window integrals.
    pub rho: f64,
}

impl DelaySpec {
    /// All three delays equal, with the default discount rate 1.
    pub fn uniform(delta: DelayFn) -> Self {
        DelaySpec {
            delta1: delta.clone(),
            delta2: delta.clone(),
            delta3: delta,
            rho: 1.0,
        }
    }

    pub fn component(&self, which: DelayComponent) -> &DelayFn {
        match which {
            DelayComponent::Delta1 => &self.delta1,
            DelayComponent::Delta2 => &self.delta2,
            DelayComponent::Delta3 => &self.delta3,
        }
    }
}

/// Selector for one of the three delay functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayComponent {
    Delta1,
    Delta2,
    Delta3,
}

/// Per-delay validation outcome.
#[derive(Debug, Clone)]
pub struct DelayCheck {
    /// `max over grid t <= T of (t + delta(t)) - (T + M)`; must be `<= 0`.
    pub max_overshoot: f64,
    /// `min over grid t <= T of delta(t)`; must be `>= 0`.
    pub min_value: f64,
    /// Certified substitution constant, when the family admits one.
    pub l_constant: Option<f64>,
    /// Discrete substitution bound spot-check on a family of test integrands.
    pub substitution_ok: bool,
    /// Human-readable reason when this entry fails.
    pub failure: Option<String>,
}

impl DelayCheck {
    pub fn pass(&self) -> bool {
        self.failure.is_none()
    }
}

/// Result of [`validate_delays`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: [DelayCheck; 3],
    /// The single constant covering all three delays (max of the per-delay
    /// constants), present only when all three certify.
    pub certified_l: Option<f64>,
    pub pass: bool,
}

impl ValidationReport {
    /// First failure message, for diagnostics.
    pub fn failure_message(&self) -> Option<String> {
        let names = ["delta1", "delta2", "delta3"];
        for (name, check) in names.iter().zip(self.checks.iter()) {
            if let Some(msg) = &check.failure {
                return Some(format!("{name}: {msg}"));
            }
        }
        None
    }
}

/// Integrands for the substitution-bound spot-check.
fn substitution_test_fns() -> [fn(f64) -> f64; 5] {
    [
        |_| 1.0,
        |u| u,
        |u| u * u,
        |u| u.exp(),
        |u| (-u).exp(),
    ]
}

fn check_one_delay(grid: &TimeGrid, delay: &DelayFn) -> DelayCheck {
    let t_end = grid.time(grid.last_index());
    let mut max_overshoot = f64::NEG_INFINITY;
    let mut min_value = f64::INFINITY;
    for i in 0..=grid.horizon_index() {
        let t = grid.time(i);
        let v = delay.eval(t, grid);
        max_overshoot = max_overshoot.max(t + v - t_end);
        min_value = min_value.min(v);
    }

    let l_constant = delay.certified_l();
    let mut failure = None;
    if min_value < 0.0 {
        failure = Some(format!(
            "{} delay takes negative value {min_value}",
            delay.kind_name()
        ));
    } else if max_overshoot > GRID_SNAP_TOL * t_end.max(1.0) {
        failure = Some(format!(
            "delay horizon bound violated: max of t + delta(t) exceeds T + M = {t_end} by {max_overshoot}"
        ));
    } else if l_constant.is_none() {
        failure = Some(match delay {
            DelayFn::Affine { b, .. } => {
                format!("affine slope {b} <= -1 admits no substitution constant")
            }
            _ => "no substitution constant can be certified".to_string(),
        });
    }

    // Spot-check the substitution bound with rectangle sums; the continuous
    // inequality is exact for certified families, so the slack only has to
    // absorb quadrature error.
    let mut substitution_ok = true;
    if failure.is_none() {
        let l = l_constant.unwrap();
        let dt = grid.dt();
        for gamma in substitution_test_fns() {
            let mut lhs = 0.0;
            for i in 0..grid.horizon_index() {
                let t = grid.time(i);
                lhs += gamma(t + delay.eval(t, grid)) * dt;
            }
            let mut rhs = 0.0;
            let mut gamma_max: f64 = 0.0;
            for i in 0..grid.last_index() {
                let g = gamma(grid.time(i));
                rhs += g * dt;
                gamma_max = gamma_max.max(g.abs());
            }
            gamma_max = gamma_max.max(gamma(t_end).abs());
            let slack = 5.0 * dt * gamma_max.max(1.0);
            if lhs > l * rhs + slack {
                substitution_ok = false;
                failure = Some(format!(
                    "substitution bound spot-check failed: sum G(t + delta(t)) dt = {lhs} > L * sum G dt + slack = {}",
                    l * rhs + slack
                ));
                break;
            }
        }
    }

    DelayCheck {
        max_overshoot,
        min_value,
        l_constant,
        substitution_ok,
        failure,
    }
}

/// Validate a delay spec against a grid: pointwise horizon bound, sign,
/// and the substitution constant for each component.
pub fn validate_delays(grid: &TimeGrid, delays: &DelaySpec) -> ValidationReport {
    if !(delays.rho > 0.0) {
        let bad = DelayCheck {
            max_overshoot: f64::NAN,
            min_value: f64::NAN,
            l_constant: None,
            substitution_ok: false,
            failure: Some(format!("discount rate rho = {} must be positive", delays.rho)),
        };
        return ValidationReport {
            checks: [bad.clone(), bad.clone(), bad],
            certified_l: None,
            pass: false,
        };
    }
    let checks = [
        check_one_delay(grid, &delays.delta1),
        check_one_delay(grid, &delays.delta2),
        check_one_delay(grid, &delays.delta3),
    ];
    let pass = checks.iter().all(|c| c.pass());
    let certified_l = if pass {
        checks
            .iter()
            .map(|c| c.l_constant.unwrap())
            .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))))
    } else {
        None
    };
    ValidationReport {
        checks,
        certified_l,
        pass,
    }
}

/// Grid index of `t_i + delta(t_i)`, snapped to the nearest grid point
/// (ties round up). Only meaningful for `i <= horizon_index` on a
/// validated spec.
pub fn shifted_index(grid: &TimeGrid, i: usize, delay: &DelayFn) -> usize {
    debug_assert!(i <= grid.horizon_index());
    let t = grid.time(i);
    grid.nearest_index(t + delay.eval(t, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_partition() {
        let g = build_grid(1.0, 0.0, 10).unwrap();
        assert_eq!(g.n_times(), 11);
        assert_eq!(g.horizon_index(), 10);
        assert_eq!(g.last_index(), 10);
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.index_of(1.0).unwrap(), 10);
    }

    #[test]
    fn horizon_and_window_on_grid() {
        let g = build_grid(1.0, 0.5, 15).unwrap();
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.horizon_index(), 10);
        assert_eq!(g.index_of(1.5).unwrap(), 15);
    }

    #[test]
    fn divisibility_check() {
        // dt = 0.125 puts T = 1 on index 8: accepted.
        assert!(build_grid(1.0, 0.25, 10).is_ok());
        // dt = 0.13 puts T = 1 at fractional index: rejected.
        assert!(build_grid(1.0, 0.3, 10).is_err());
    }

    #[test]
    fn index_time_round_trip() {
        let g = build_grid(0.7, 0.35, 21).unwrap();
        for i in 0..g.n_times() {
            assert_eq!(g.index_of(g.time(i)).unwrap(), i);
        }
    }

    #[test]
    fn constant_delay_within_window_passes() {
        let g = build_grid(1.0, 0.2, 12).unwrap();
        let spec = DelaySpec::uniform(DelayFn::Constant(0.2));
        let report = validate_delays(&g, &spec);
        assert!(report.pass, "{:?}", report.failure_message());
        assert_eq!(report.certified_l, Some(1.0));
    }

    #[test]
    fn constant_delay_overshoot_fails() {
        let g = build_grid(1.0, 0.2, 12).unwrap();
        let spec = DelaySpec::uniform(DelayFn::Constant(0.5));
        let report = validate_delays(&g, &spec);
        assert!(!report.pass);
        // t = 1 gives 1.5 > 1.2.
        assert!(report.checks[0].max_overshoot > 0.29);
    }

    #[test]
    fn affine_delay_certifies_one_over_one_plus_b() {
        let g = build_grid(1.0, 0.3, 130).unwrap();
        let spec = DelaySpec::uniform(DelayFn::Affine { a: 0.1, b: 0.1 });
        let report = validate_delays(&g, &spec);
        assert!(report.pass, "{:?}", report.failure_message());
        let l = report.certified_l.unwrap();
        assert!((l - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn affine_slope_below_minus_one_rejected() {
        let g = build_grid(1.0, 0.5, 15).unwrap();
        let spec = DelaySpec::uniform(DelayFn::Affine { a: 0.4, b: -1.2 });
        let report = validate_delays(&g, &spec);
        assert!(!report.pass);
    }

    // Oracle for the affine substitution constant: change of variables
    // u = s + delta(s) with du = (1 + b) ds, checked by direct quadrature
    // of G(u) = u^2 on a fine grid.
    #[test]
    fn affine_substitution_constant_against_quadrature() {
        let (a, b) = (0.1, 0.1);
        let (t_hor, t_end) = (1.0, 1.3);
        let n = 2_000_000usize;
        let dt = t_hor / n as f64;
        let gamma = |u: f64| u * u;
        let mut lhs = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) * dt;
            lhs += gamma(s + a + b * s) * dt;
        }
        let m = 2_600_000usize;
        let du = t_end / m as f64;
        let mut full = 0.0;
        for i in 0..m {
            let u = (i as f64 + 0.5) * du;
            full += gamma(u) * du;
        }
        let l = 1.0 / (1.0 + b);
        // The substituted integral over the image interval is exactly
        // L * integral_{a}^{(1+b) t_hor + a} G du <= L * integral_0^{t_end} G du.
        assert!(lhs <= l * full + 1e-9, "lhs = {lhs}, L*full = {}", l * full);
    }

    #[test]
    fn shifted_index_rounding() {
        let g = build_grid(1.0, 0.5, 15).unwrap();
        assert_eq!(shifted_index(&g, 3, &DelayFn::Constant(0.2)), 5);
        assert_eq!(shifted_index(&g, 3, &DelayFn::Constant(0.0)), 3);
        // Nearest-point snap: 0.3 + 0.14 = 0.44 -> index 4.
        assert_eq!(shifted_index(&g, 3, &DelayFn::Constant(0.14)), 4);
        // Tie rounds up: 0.3 + 0.15 = 0.45 -> index 5 (not 4).
        assert_eq!(shifted_index(&g, 3, &DelayFn::Constant(0.15)), 5);
    }

    #[test]
    fn shifted_index_stays_in_range() {
        let g = build_grid(1.0, 0.4, 14).unwrap();
        let spec = DelaySpec::uniform(DelayFn::Affine { a: 0.05, b: 0.3 });
        let report = validate_delays(&g, &spec);
        assert!(report.pass);
        for i in 0..=g.horizon_index() {
            let j = shifted_index(&g, i, &spec.delta1);
            assert!(j >= i && j <= g.last_index());
        }
    }

    // Discrete analogue of the substitution bound for a grid-multiple
    // constant delay: the shifted sum re-reads a subset of the grid values.
    #[test]
    fn discrete_substitution_exact_for_grid_multiple_constant() {
        let g = build_grid(1.0, 0.5, 15).unwrap();
        let delay = DelayFn::Constant(0.3);
        let gamma: Vec<f64> = (0..g.n_times()).map(|i| (i as f64 * 0.7).sin().powi(2)).collect();
        let dt = g.dt();
        let lhs: f64 = (0..=g.horizon_index())
            .map(|i| gamma[shifted_index(&g, i, &delay)] * dt)
            .sum();
        let rhs: f64 = (0..g.n_times()).map(|i| gamma[i] * dt).sum();
        assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn tabulated_requires_declared_constant() {
        let g = build_grid(1.0, 0.5, 15).unwrap();
        let values = vec![0.2; g.horizon_index() + 1];
        let good = DelaySpec::uniform(DelayFn::Tabulated {
            values: values.clone(),
            declared_l: 1.0,
        });
        assert!(validate_delays(&g, &good).pass);
        let bad = DelaySpec::uniform(DelayFn::Tabulated {
            values,
            declared_l: 0.0,
        });
        assert!(!validate_delays(&g, &bad).pass);
    }
}
