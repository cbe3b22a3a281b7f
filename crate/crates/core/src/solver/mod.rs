//! The backward particle solver.
//!
//! One backward Euler step extracts `(Y_i, Z_i, K_i)` from the next-step
//! values by regression conditional expectations; the fixed-point loop in
//! [`picard`] repeats the sweep with the anticipated terms, the weighted
//! jump coefficient, and the particle law frozen from the previous
//! iterate, which realizes the solution map whose contraction the
//! analysis module measures.

mod condexp;
mod picard;
mod step;

pub use condexp::{CondExpEstimator, RegressionDiagnostics, StepRegression};
pub use picard::{picard_solve, solve_mf_bsde, FrozenAnticipated, IterationTrace};
pub use step::{anticipated_terms, bsde_step, AnticipatedSlice, StepFrozen, StepOutput};

use crate::error::{Error, Result};
use crate::lattice::{validate_delays, DelaySpec, TimeGrid};
use crate::measure::{wasserstein2_exact_small_n, EmpiricalMeasure};
use crate::noise::LevyModel;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

/// Which marginal of the solution triple the driver's law argument sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LawMarginal {
    /// Scalar cloud of `Y` only (the comparison-theorem signature).
    #[default]
    YOnly,
    /// Joint cloud of `(Y, Z, gamma)` in `R^{1+d+1}`.
    Full,
}

/// Which argument slots a driver actually reads.
///
/// Unused anticipated slots are skipped by the solver (no projection is
/// computed for them), and the comparison harness uses the flags to decide
/// which monotonicity probes apply.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriverFlags {
    pub uses_y: bool,
    pub uses_z: bool,
    pub uses_gamma: bool,
    pub uses_a: bool,
    pub uses_b: bool,
    pub uses_c: bool,
    pub uses_a_bar: bool,
    pub uses_b_bar: bool,
    pub uses_c_bar: bool,
    pub uses_law: bool,
    pub law_marginal: LawMarginal,
}

impl DriverFlags {
    /// Restricted comparison signature: no anticipated `Z` or `gamma`
    /// slots, law is the scalar `Y` marginal.
    pub fn is_restricted(&self) -> bool {
        !self.uses_b
            && !self.uses_c
            && !self.uses_b_bar
            && !self.uses_c_bar
            && (!self.uses_law || self.law_marginal == LawMarginal::YOnly)
    }

    /// Plain mean-field signature: restricted and without anticipated
    /// arguments entirely.
    pub fn is_mean_field_only(&self) -> bool {
        self.is_restricted() && !self.uses_a && !self.uses_a_bar
    }

    pub fn uses_any_anticipated(&self) -> bool {
        self.uses_a
            || self.uses_b
            || self.uses_c
            || self.uses_a_bar
            || self.uses_b_bar
            || self.uses_c_bar
    }
}

/// Argument pack passed to a driver at one `(time, particle)`.
#[derive(Debug)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub y: f64,
    pub z: &'a [f64],
    /// Weighted jump coefficient `sum_j k_j l_j lambda_j`.
    pub gamma: f64,
    /// One-point anticipated `Y` (projected on the current filtration).
    pub a: f64,
    /// One-point anticipated `Z`.
    pub b: &'a [f64],
    /// One-point anticipated `gamma`.
    pub c: f64,
    /// Discounted window average of future `Y`.
    pub a_bar: f64,
    /// Discounted window average of future `Z`.
    pub b_bar: &'a [f64],
    /// Discounted window average of future `gamma`.
    pub c_bar: f64,
    /// Law cloud at the current time (marginal per the driver flags).
    pub law: &'a EmpiricalMeasure,
}

/// A driver function together with its argument-usage flags.
#[derive(Clone)]
pub struct Driver {
    eval: Arc<dyn Fn(&DriverArgs<'_>) -> f64 + Send + Sync>,
    pub flags: DriverFlags,
}

impl Driver {
    pub fn new<F>(flags: DriverFlags, f: F) -> Self
    where
        F: Fn(&DriverArgs<'_>) -> f64 + Send + Sync + 'static,
    {
        Driver {
            eval: Arc::new(f),
            flags,
        }
    }

    /// Driver that is identically zero.
    pub fn zero() -> Self {
        Driver::new(DriverFlags::default(), |_| 0.0)
    }

    pub fn eval(&self, args: &DriverArgs<'_>) -> f64 {
        (self.eval)(args)
    }
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver").field("flags", &self.flags).finish()
    }
}

/// Prescribed solution data on the window `[T, T+M]`: values for `Y`
/// (`phi`), `Z` (`phi_z`) and `K` (`psi`) per grid time and particle.
#[derive(Debug, Clone)]
pub struct TerminalData {
    window_len: usize,
    n_particles: usize,
    d: usize,
    n_marks: usize,
    phi: Vec<f64>,
    phi_z: Vec<f64>,
    psi: Vec<f64>,
}

impl TerminalData {
    /// Build from per-(grid index, particle) closures; `i` ranges over the
    /// window indices `horizon_index ..= last_index`.
    pub fn build<FY, FZ, FK>(
        grid: &TimeGrid,
        n_particles: usize,
        d: usize,
        n_marks: usize,
        mut phi: FY,
        mut phi_z: FZ,
        mut psi: FK,
    ) -> Result<Self>
    where
        FY: FnMut(usize, usize) -> f64,
        FZ: FnMut(usize, usize, usize) -> f64,
        FK: FnMut(usize, usize, usize) -> f64,
    {
        let window_len = grid.last_index() - grid.horizon_index() + 1;
        let mut data = TerminalData {
            window_len,
            n_particles,
            d,
            n_marks,
            phi: vec![0.0; window_len * n_particles],
            phi_z: vec![0.0; window_len * n_particles * d],
            psi: vec![0.0; window_len * n_particles * n_marks],
        };
        for w in 0..window_len {
            let i = grid.horizon_index() + w;
            for p in 0..n_particles {
                data.phi[w * n_particles + p] = phi(i, p);
                for c in 0..d {
                    data.phi_z[(w * n_particles + p) * d + c] = phi_z(i, p, c);
                }
                for j in 0..n_marks {
                    data.psi[(w * n_particles + p) * n_marks + j] = psi(i, p, j);
                }
            }
        }
        if data.phi.iter().any(|x| !x.is_finite())
            || data.phi_z.iter().any(|x| !x.is_finite())
            || data.psi.iter().any(|x| !x.is_finite())
        {
            return Err(Error::Problem("non-finite terminal data".into()));
        }
        Ok(data)
    }

    /// Deterministic constant terminal: `phi = value`, `phi_z = psi = 0`.
    pub fn constant(
        grid: &TimeGrid,
        n_particles: usize,
        d: usize,
        n_marks: usize,
        value: f64,
    ) -> Result<Self> {
        TerminalData::build(grid, n_particles, d, n_marks, |_, _| value, |_, _, _| 0.0, |_, _, _| 0.0)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn phi(&self, w: usize, p: usize) -> f64 {
        self.phi[w * self.n_particles + p]
    }

    pub fn phi_z(&self, w: usize, p: usize, c: usize) -> f64 {
        self.phi_z[(w * self.n_particles + p) * self.d + c]
    }

    pub fn psi(&self, w: usize, p: usize, j: usize) -> f64 {
        self.psi[(w * self.n_particles + p) * self.n_marks + j]
    }

    /// Shift the `phi` component by a constant (used to build ordered
    /// terminal pairs for the comparison harness).
    pub fn with_phi_offset(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for v in out.phi.iter_mut() {
            *v += offset;
        }
        out
    }
}

/// The discrete solution triple plus the cached weighted jump coefficient,
/// stored per grid time and particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    n_times: usize,
    n_particles: usize,
    d: usize,
    n_marks: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    k: Vec<f64>,
    gamma: Vec<f64>,
}

impl SolutionField {
    pub fn zeros(n_times: usize, n_particles: usize, d: usize, n_marks: usize) -> Self {
        SolutionField {
            n_times,
            n_particles,
            d,
            n_marks,
            y: vec![0.0; n_times * n_particles],
            z: vec![0.0; n_times * n_particles * d],
            k: vec![0.0; n_times * n_particles * n_marks],
            gamma: vec![0.0; n_times * n_particles],
        }
    }

    /// Zero on `[0, T)`, terminal data on `[T, T+M]` (with `gamma`
    /// recomputed from `psi`).
    pub fn with_terminal(
        grid: &TimeGrid,
        levy: &LevyModel,
        terminal: &TerminalData,
    ) -> Self {
        let n_times = grid.n_times();
        let n = terminal.n_particles;
        let mut field = SolutionField::zeros(n_times, n, terminal.d, terminal.n_marks);
        for w in 0..terminal.window_len {
            let i = grid.horizon_index() + w;
            for p in 0..n {
                field.set_y(i, p, terminal.phi(w, p));
                for c in 0..terminal.d {
                    field.set_z(i, p, c, terminal.phi_z(w, p, c));
                }
                let mut g = 0.0;
                for j in 0..terminal.n_marks {
                    let kv = terminal.psi(w, p, j);
                    field.set_k(i, p, j, kv);
                    g += kv * levy.weight(j) * levy.intensity(j);
                }
                field.set_gamma(i, p, g);
            }
        }
        field
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn y(&self, i: usize, p: usize) -> f64 {
        self.y[i * self.n_particles + p]
    }

    pub fn z(&self, i: usize, p: usize, c: usize) -> f64 {
        self.z[(i * self.n_particles + p) * self.d + c]
    }

    pub fn k(&self, i: usize, p: usize, j: usize) -> f64 {
        self.k[(i * self.n_particles + p) * self.n_marks + j]
    }

    pub fn gamma(&self, i: usize, p: usize) -> f64 {
        self.gamma[i * self.n_particles + p]
    }

    pub fn set_y(&mut self, i: usize, p: usize, v: f64) {
        self.y[i * self.n_particles + p] = v;
    }

    pub fn set_z(&mut self, i: usize, p: usize, c: usize, v: f64) {
        self.z[(i * self.n_particles + p) * self.d + c] = v;
    }

    pub fn set_k(&mut self, i: usize, p: usize, j: usize, v: f64) {
        self.k[(i * self.n_particles + p) * self.n_marks + j] = v;
    }

    pub fn set_gamma(&mut self, i: usize, p: usize, v: f64) {
        self.gamma[i * self.n_particles + p] = v;
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_particles..(i + 1) * self.n_particles]
    }

    pub fn z_at(&self, i: usize) -> &[f64] {
        &self.z[i * self.n_particles * self.d..(i + 1) * self.n_particles * self.d]
    }

    pub fn k_at(&self, i: usize) -> &[f64] {
        &self.k[i * self.n_particles * self.n_marks..(i + 1) * self.n_particles * self.n_marks]
    }

    pub fn gamma_at(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.n_particles..(i + 1) * self.n_particles]
    }

    /// Component-wise difference, same shape.
    pub fn difference(&self, other: &SolutionField) -> SolutionField {
        assert_eq!(self.n_times, other.n_times);
        assert_eq!(self.n_particles, other.n_particles);
        let mut out = self.clone();
        for (a, b) in out.y.iter_mut().zip(&other.y) {
            *a -= b;
        }
        for (a, b) in out.z.iter_mut().zip(&other.z) {
            *a -= b;
        }
        for (a, b) in out.k.iter_mut().zip(&other.k) {
            *a -= b;
        }
        for (a, b) in out.gamma.iter_mut().zip(&other.gamma) {
            *a -= b;
        }
        out
    }

    /// Largest `|Y|` over grid indices `0..=last` and all particles.
    pub fn max_abs_y(&self, last: usize) -> f64 {
        self.y[..(last + 1) * self.n_particles]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Recompute `sum_j k_j l_j lambda_j` and compare against the cached
    /// `gamma`; returns the largest absolute mismatch.
    pub fn gamma_consistency_error(&self, levy: &LevyModel) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_times {
            for p in 0..self.n_particles {
                let mut g = 0.0;
                for j in 0..self.n_marks {
                    g += self.k(i, p, j) * levy.weight(j) * levy.intensity(j);
                }
                worst = worst.max((g - self.gamma(i, p)).abs());
            }
        }
        worst
    }
}

/// Fixed-point loop configuration.
#[derive(Debug, Clone, Copy)]
pub struct PicardConfig {
    /// Weight of the exponential norm used for the stopping rule.
    pub beta: f64,
    /// Stopping threshold on the weighted norm of successive differences.
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed-point damping in `(0, 1]`; 1 is the undamped map.
    pub damping: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            beta: 0.0,
            tol: 1e-9,
            max_iter: 25,
            damping: 1.0,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Problem(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Problem("max_iter must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Problem(format!(
                "damping = {} must lie in (0, 1]",
                self.damping
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Problem(format!(
                "beta = {} must be finite and nonnegative",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Number of random probes in the driver Lipschitz check.
const LIPSCHITZ_PROBES: usize = 200;
/// Allowed slack over the declared constant, and allowed probe failures.
const LIPSCHITZ_SLACK: f64 = 1.05;
const LIPSCHITZ_MAX_FAILURES: usize = 2;

/// Fully specified problem: discretization, noise model, driver, terminal
/// data and the declared Lipschitz constant.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid: TimeGrid,
    pub delays: DelaySpec,
    pub levy: LevyModel,
    pub d: usize,
    pub driver: Driver,
    pub terminal: TerminalData,
    pub lipschitz_c: f64,
}

impl ProblemSpec {
    /// Validate delays against the grid, the terminal shape, and spot-check
    /// the declared Lipschitz constant by randomized probing.
    pub fn new(
        grid: TimeGrid,
        delays: DelaySpec,
        levy: LevyModel,
        d: usize,
        driver: Driver,
        terminal: TerminalData,
        lipschitz_c: f64,
    ) -> Result<Self> {
        let report = validate_delays(&grid, &delays);
        if !report.pass {
            return Err(Error::Delay(
                report
                    .failure_message()
                    .unwrap_or_else(|| "delay validation failed".into()),
            ));
        }
        if !(lipschitz_c > 0.0) {
            return Err(Error::Problem(format!(
                "declared Lipschitz constant {lipschitz_c} must be positive"
            )));
        }
        let expected_window = grid.last_index() - grid.horizon_index() + 1;
        if terminal.window_len != expected_window
            || terminal.d != d
            || terminal.n_marks != levy.n_marks()
        {
            return Err(Error::Problem(format!(
                "terminal data shape (window {}, d {}, marks {}) does not match problem (window {expected_window}, d {d}, marks {})",
                terminal.window_len,
                terminal.d,
                terminal.n_marks,
                levy.n_marks()
            )));
        }
        let spec = ProblemSpec {
            grid,
            delays,
            levy,
            d,
            driver,
            terminal,
            lipschitz_c,
        };
        spec.probe_lipschitz()?;
        Ok(spec)
    }

    fn law_dim(&self) -> usize {
        match self.driver.flags.law_marginal {
            LawMarginal::YOnly => 1,
            LawMarginal::Full => 1 + self.d + 1,
        }
    }

    /// Randomized check of the declared Lipschitz constant: on random
    /// argument pairs, `|f - f'|` must stay below
    /// `1.05 * C * (sum of argument distances)` on at least 99% of probes.
    fn probe_lipschitz(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4c69_7073);
        let d = self.d;
        let law_dim = self.law_dim();
        let cloud_n = 6;
        let mut failures = 0usize;
        let mut worst: f64 = 0.0;
        for _ in 0..LIPSCHITZ_PROBES {
            let t: f64 = rng.random_range(0.0..=self.grid.horizon());
            let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
            };
            let s1 = ProbeArgs::draw(&mut rng, d, law_dim, cloud_n, &draw);
            let s2 = ProbeArgs::draw(&mut rng, d, law_dim, cloud_n, &draw);
            let f1 = self.driver.eval(&s1.args(t));
            let f2 = self.driver.eval(&s2.args(t));
            if !f1.is_finite() || !f2.is_finite() {
                return Err(Error::Problem(
                    "driver returned a non-finite value on a Lipschitz probe".into(),
                ));
            }
            let dist = s1.distance(&s2)?;
            let bound = LIPSCHITZ_SLACK * self.lipschitz_c * dist;
            if (f1 - f2).abs() > bound {
                failures += 1;
                worst = worst.max((f1 - f2).abs() / dist.max(1e-300));
            }
        }
        if failures > LIPSCHITZ_MAX_FAILURES {
            return Err(Error::Problem(format!(
                "driver violated the declared Lipschitz constant {} on {failures}/{LIPSCHITZ_PROBES} probes (worst observed ratio {worst:.3})",
                self.lipschitz_c
            )));
        }
        Ok(())
    }
}

struct ProbeArgs {
    y: f64,
    z: Vec<f64>,
    gamma: f64,
    a: f64,
    b: Vec<f64>,
    c: f64,
    a_bar: f64,
    b_bar: Vec<f64>,
    c_bar: f64,
    law: EmpiricalMeasure,
}

impl ProbeArgs {
    fn draw(
        rng: &mut ChaCha8Rng,
        d: usize,
        law_dim: usize,
        cloud_n: usize,
        draw: &dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    ) -> ProbeArgs {
        ProbeArgs {
            y: draw(rng, 1)[0],
            z: draw(rng, d),
            gamma: draw(rng, 1)[0],
            a: draw(rng, 1)[0],
            b: draw(rng, d),
            c: draw(rng, 1)[0],
            a_bar: draw(rng, 1)[0],
            b_bar: draw(rng, d),
            c_bar: draw(rng, 1)[0],
            law: EmpiricalMeasure::new(law_dim, draw(rng, law_dim * cloud_n))
                .expect("probe cloud"),
        }
    }

    fn args(&self, t: f64) -> DriverArgs<'_> {
        DriverArgs {
            t,
            y: self.y,
            z: &self.z,
            gamma: self.gamma,
            a: self.a,
            b: &self.b,
            c: self.c,
            a_bar: self.a_bar,
            b_bar: &self.b_bar,
            c_bar: self.c_bar,
            law: &self.law,
        }
    }

    /// Sum of per-argument distances entering the Lipschitz bound.
    fn distance(&self, other: &ProbeArgs) -> Result<f64> {
        let norm = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        Ok((self.y - other.y).abs()
            + norm(&self.z, &other.z)
            + (self.gamma - other.gamma).abs()
            + (self.a - other.a).abs()
            + norm(&self.b, &other.b)
            + (self.c - other.c).abs()
            + (self.a_bar - other.a_bar).abs()
            + norm(&self.b_bar, &other.b_bar)
            + (self.c_bar - other.c_bar).abs()
            + wasserstein2_exact_small_n(&self.law, &other.law)?)
    }
}
