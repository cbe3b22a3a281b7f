//! Driving noise: finite-activity jump model and the simulated particle
//! ensemble of Brownian increments and Poisson mark counts.
//!
//! One root seed drives everything. Each particle draws from its own
//! ChaCha stream (one stream per particle and channel), so the ensemble is
//! reproducible bit-for-bit regardless of how particles are scheduled
//! across workers.

use crate::error::{Error, Result};
use crate::lattice::TimeGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use std::io::{Read, Write};

/// Finite list of jump marks with intensities and integrand weights.
///
/// The weights play the role of the kernel `l` in the scalar jump
/// coefficient `gamma = sum_j k_j * l_j * lambda_j`; each must satisfy
/// `0 < l_j <= C_l * min(1, |e_j|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    marks: Vec<f64>,
    intensities: Vec<f64>,
    weights: Vec<f64>,
    weight_bound: f64,
    total_intensity: f64,
    weight_sq_intensity: f64,
}

impl LevyModel {
    pub fn new(
        marks: Vec<f64>,
        intensities: Vec<f64>,
        weights: Vec<f64>,
        weight_bound: f64,
    ) -> Result<Self> {
        let m = marks.len();
        if intensities.len() != m || weights.len() != m {
            return Err(Error::Levy(format!(
                "marks/intensities/weights length mismatch: {m}/{}/{}",
                intensities.len(),
                weights.len()
            )));
        }
        if !(weight_bound > 0.0) {
            return Err(Error::Levy(format!(
                "weight bound C_l = {weight_bound} must be positive"
            )));
        }
        for j in 0..m {
            if !(intensities[j] > 0.0) || !intensities[j].is_finite() {
                return Err(Error::Levy(format!(
                    "intensity lambda_{j} = {} must be positive",
                    intensities[j]
                )));
            }
            let cap = weight_bound * marks[j].abs().min(1.0);
            if !(weights[j] > 0.0 && weights[j] <= cap) {
                return Err(Error::Levy(format!(
                    "weight l_{j} = {} outside (0, C_l * min(1,|e_{j}|)] = (0, {cap}]",
                    weights[j]
                )));
            }
        }
        let total_intensity = intensities.iter().sum();
        let weight_sq_intensity = weights
            .iter()
            .zip(&intensities)
            .map(|(l, lam)| l * l * lam)
            .sum();
        Ok(LevyModel {
            marks,
            intensities,
            weights,
            weight_bound,
            total_intensity,
            weight_sq_intensity,
        })
    }

    /// Degenerate model with no jumps.
    pub fn none() -> Self {
        LevyModel {
            marks: Vec::new(),
            intensities: Vec::new(),
            weights: Vec::new(),
            weight_bound: 1.0,
            total_intensity: 0.0,
            weight_sq_intensity: 0.0,
        }
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn intensity(&self, j: usize) -> f64 {
        self.intensities[j]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_bound(&self) -> f64 {
        self.weight_bound
    }

    /// Total jump intensity.
    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    /// `sum_j l_j^2 lambda_j`, the discrete second moment of the weight.
    pub fn weight_sq_intensity(&self) -> f64 {
        self.weight_sq_intensity
    }
}

/// Simulated driving noise for `N` particles on the full grid `[0, T+M]`.
///
/// Stores per-step increments plus the cumulative state used as the
/// regression coordinates: the Brownian value `W_{t_i}` and the running
/// compensated weighted jump value `J_{t_i} = sum_{k<i} sum_j l_j
/// (dN_{k,j} - lambda_j dt)`. Immutable once built.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    levy: LevyModel,
    n_particles: usize,
    d: usize,
    seed: u64,
    // Increments over step i (from t_i to t_{i+1}); flat [p][i][c] / [p][i][j].
    dw: Vec<f64>,
    jump_counts: Vec<u32>,
    // Cumulative values at grid point i; flat [p][i][c] / [p][i].
    w_at: Vec<f64>,
    jump_value_at: Vec<f64>,
}

const DUMP_MAGIC: &[u8; 8] = b"AMBSDE01";

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn levy(&self) -> &LevyModel {
        &self.levy
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn n_steps(&self) -> usize {
        self.grid.last_index()
    }

    /// Brownian increment of coordinate `c` over step `i` for particle `p`.
    pub fn dw(&self, p: usize, i: usize, c: usize) -> f64 {
        self.dw[(p * self.n_steps() + i) * self.d + c]
    }

    /// Poisson count of mark `j` over step `i` for particle `p`.
    pub fn jump_count(&self, p: usize, i: usize, j: usize) -> u32 {
        let m = self.levy.n_marks();
        self.jump_counts[(p * self.n_steps() + i) * m + j]
    }

    /// Brownian value `W_{t_i}` of coordinate `c` for particle `p`.
    pub fn brownian_at(&self, p: usize, i: usize, c: usize) -> f64 {
        self.w_at[(p * (self.n_steps() + 1) + i) * self.d + c]
    }

    /// Cumulative compensated weighted jump value `J_{t_i}` for particle `p`.
    pub fn jump_value_at(&self, p: usize, i: usize) -> f64 {
        self.jump_value_at[p * (self.n_steps() + 1) + i]
    }

    /// One sample of the compensated measure over step `i` and mark `j`:
    /// `count - lambda_j * dt`.
    pub fn compensated_increment(&self, p: usize, i: usize, j: usize) -> f64 {
        self.jump_count(p, i, j) as f64 - self.levy.intensity(j) * self.grid.dt()
    }

    /// Increment of the weighted compensated jump integral over step `i`:
    /// `sum_j l_j * (count - lambda_j * dt)`.
    pub fn weighted_jump_integral(&self, p: usize, i: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.levy.n_marks() {
            acc += self.levy.weight(j) * self.compensated_increment(p, i, j);
        }
        acc
    }

    /// Flat binary dump: header (N, steps, d, m, seed), then the Brownian
    /// increments and jump counts row-major. Cumulative arrays are derived
    /// state and are rebuilt on load.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        for v in [
            self.n_particles as u64,
            self.n_steps() as u64,
            self.d as u64,
            self.levy.n_marks() as u64,
            self.seed,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for x in &self.dw {
            out.write_all(&x.to_le_bytes())?;
        }
        for c in &self.jump_counts {
            out.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a dump written by [`PathEnsemble::write_binary`]; the grid and
    /// jump model must match the dumped shape.
    pub fn read_binary<R: Read>(input: &mut R, grid: &TimeGrid, levy: &LevyModel) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::EnsembleIo("bad magic".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut next_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n_particles = next_u64(input)? as usize;
        let steps = next_u64(input)? as usize;
        let d = next_u64(input)? as usize;
        let m = next_u64(input)? as usize;
        let seed = next_u64(input)?;
        if steps != grid.last_index() {
            return Err(Error::EnsembleIo(format!(
                "dump has {steps} steps, grid has {}",
                grid.last_index()
            )));
        }
        if m != levy.n_marks() {
            return Err(Error::EnsembleIo(format!(
                "dump has {m} marks, model has {}",
                levy.n_marks()
            )));
        }
        let mut dw = vec![0.0; n_particles * steps * d];
        let mut f64buf = [0u8; 8];
        for x in dw.iter_mut() {
            input.read_exact(&mut f64buf)?;
            *x = f64::from_le_bytes(f64buf);
        }
        let mut jump_counts = vec![0u32; n_particles * steps * m];
        let mut u32buf = [0u8; 4];
        for c in jump_counts.iter_mut() {
            input.read_exact(&mut u32buf)?;
            *c = u32::from_le_bytes(u32buf);
        }
        let mut ensemble = PathEnsemble {
            grid: grid.clone(),
            levy: levy.clone(),
            n_particles,
            d,
            seed,
            dw,
            jump_counts,
            w_at: Vec::new(),
            jump_value_at: Vec::new(),
        };
        ensemble.rebuild_cumulative();
        Ok(ensemble)
    }

    fn rebuild_cumulative(&mut self) {
        let steps = self.n_steps();
        let (n, d, m) = (self.n_particles, self.d, self.levy.n_marks());
        let dt = self.grid.dt();
        let mut w_at = vec![0.0; n * (steps + 1) * d];
        let mut jump_value_at = vec![0.0; n * (steps + 1)];
        let weights = self.levy.weights().to_vec();
        let intensities = self.levy.intensities().to_vec();
        w_at
            .par_chunks_mut((steps + 1) * d)
            .zip(jump_value_at.par_chunks_mut(steps + 1))
            .enumerate()
            .for_each(|(p, (w_row, j_row))| {
                for i in 0..steps {
                    for c in 0..d {
                        w_row[(i + 1) * d + c] =
                            w_row[i * d + c] + self.dw[(p * steps + i) * d + c];
                    }
                    let mut inc = 0.0;
                    for j in 0..m {
                        let count = self.jump_counts[(p * steps + i) * m + j] as f64;
                        inc += weights[j] * (count - intensities[j] * dt);
                    }
                    j_row[i + 1] = j_row[i] + inc;
                }
            });
        self.w_at = w_at;
        self.jump_value_at = jump_value_at;
    }
}

/// Simulate the driving noise for `n_particles` particles over the whole
/// grid. Particle `p` draws its Brownian increments from stream `2p` and
/// its jump counts from stream `2p + 1` of the seeded generator.
pub fn simulate_ensemble(
    grid: &TimeGrid,
    levy: &LevyModel,
    d: usize,
    n_particles: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_particles < 2 {
        return Err(Error::Problem(format!(
            "need at least 2 particles, got {n_particles}"
        )));
    }
    if d < 1 {
        return Err(Error::Problem("Brownian dimension must be >= 1".into()));
    }
    let steps = grid.last_index();
    let m = levy.n_marks();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let poissons: Vec<Poisson<f64>> = levy
        .intensities()
        .iter()
        .map(|lam| Poisson::new(lam * dt).expect("positive rate"))
        .collect();

    let mut dw = vec![0.0; n_particles * steps * d];
    let mut jump_counts = vec![0u32; n_particles * steps * m];

    dw.par_chunks_mut(steps * d)
        .enumerate()
        .for_each(|(p, dw_row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * p as u64);
            for x in dw_row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = z * sqrt_dt;
            }
        });
    if m > 0 {
        jump_counts
            .par_chunks_mut(steps * m)
            .enumerate()
            .for_each(|(p, count_row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * p as u64 + 1);
                for i in 0..steps {
                    for (j, pois) in poissons.iter().enumerate() {
                        count_row[i * m + j] = pois.sample(&mut rng) as u32;
                    }
                }
            });
    }

    let mut ensemble = PathEnsemble {
        grid: grid.clone(),
        levy: levy.clone(),
        n_particles,
        d,
        seed,
        dw,
        jump_counts,
        w_at: Vec::new(),
        jump_value_at: Vec::new(),
    };
    ensemble.rebuild_cumulative();
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_grid;

    fn test_levy() -> LevyModel {
        LevyModel::new(vec![1.0, -0.6], vec![2.0, 1.0], vec![0.5, 0.3], 1.0).unwrap()
    }

    #[test]
    fn levy_invariants() {
        let levy = test_levy();
        assert!((levy.total_intensity() - 3.0).abs() < 1e-15);
        // I2 = 0.25*2 + 0.09*1.
        assert!((levy.weight_sq_intensity() - 0.59).abs() < 1e-15);
    }

    #[test]
    fn levy_rejects_bad_weights() {
        assert!(LevyModel::new(vec![1.0], vec![2.0], vec![0.0], 1.0).is_err());
        assert!(LevyModel::new(vec![0.2], vec![2.0], vec![0.5], 1.0).is_err());
        assert!(LevyModel::new(vec![1.0], vec![0.0], vec![0.5], 1.0).is_err());
    }

    #[test]
    fn no_jump_model_gives_zero_counts() {
        let grid = build_grid(0.5, 0.0, 10).unwrap();
        let ens = simulate_ensemble(&grid, &LevyModel::none(), 1, 16, 7).unwrap();
        for p in 0..16 {
            for i in 0..10 {
                assert_eq!(ens.weighted_jump_integral(p, i), 0.0);
                assert_eq!(ens.jump_value_at(p, i), 0.0);
            }
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let grid = build_grid(0.5, 0.1, 12).unwrap();
        let levy = test_levy();
        let a = simulate_ensemble(&grid, &levy, 2, 64, 42).unwrap();
        let b = simulate_ensemble(&grid, &levy, 2, 64, 42).unwrap();
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.jump_counts, b.jump_counts);
        let c = simulate_ensemble(&grid, &levy, 2, 64, 43).unwrap();
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn compensated_increment_definition() {
        let grid = build_grid(1.0, 0.0, 50).unwrap();
        let levy = LevyModel::new(vec![1.0], vec![1.0], vec![0.5], 1.0).unwrap();
        let ens = simulate_ensemble(&grid, &levy, 1, 8, 3).unwrap();
        let lam_dt = 1.0 * grid.dt();
        for p in 0..8 {
            for i in 0..50 {
                let expect = ens.jump_count(p, i, 0) as f64 - lam_dt;
                assert_eq!(ens.compensated_increment(p, i, 0), expect);
                assert!((ens.weighted_jump_integral(p, i) - 0.5 * expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weighted_jump_integral_arithmetic() {
        // counts (1, 0), l = (0.5, 0.3), lambda*dt = (0.02, 0.01)
        // -> 0.5 * 0.98 + 0.3 * (-0.01) = 0.487
        let value: f64 = 0.5 * (1.0 - 0.02) + 0.3 * (0.0 - 0.01);
        assert!((value - 0.487).abs() < 1e-15);
    }

    #[test]
    fn statistical_moments() {
        let grid = build_grid(0.1, 0.0, 10).unwrap();
        let levy = LevyModel::new(vec![1.0], vec![2.0], vec![0.5], 1.0).unwrap();
        let n = 100_000usize;
        let ens = simulate_ensemble(&grid, &levy, 1, n, 11).unwrap();
        let dt = grid.dt();
        let lam_dt = 2.0 * dt;

        // Brownian increment mean and variance at a fixed step.
        let mean: f64 = (0..n).map(|p| ens.dw(p, 3, 0)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 5.0 * (dt / n as f64).sqrt(), "mean = {mean}");
        let var: f64 = (0..n).map(|p| ens.dw(p, 3, 0).powi(2)).sum::<f64>() / n as f64;
        assert!((var - dt).abs() <= 0.1 * dt, "var = {var}");

        // Poisson count mean at a fixed step.
        let cmean: f64 = (0..n).map(|p| ens.jump_count(p, 3, 0) as f64).sum::<f64>() / n as f64;
        assert!(
            (cmean - lam_dt).abs() <= 5.0 * (lam_dt / n as f64).sqrt(),
            "count mean = {cmean}"
        );

        // Compensated increment averages to zero.
        let zmean: f64 =
            (0..n).map(|p| ens.compensated_increment(p, 3, 0)).sum::<f64>() / n as f64;
        assert!(zmean.abs() <= 5.0 * (lam_dt / n as f64).sqrt());

        // Independence surrogate: Brownian and jump channels decorrelated.
        let mut corr = 0.0;
        for p in 0..n {
            corr += ens.dw(p, 3, 0) * ens.compensated_increment(p, 3, 0);
        }
        corr /= n as f64 * dt.sqrt() * lam_dt.sqrt();
        assert!(corr.abs() <= 5.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn dump_round_trip() {
        let grid = build_grid(0.5, 0.25, 15).unwrap();
        let levy = test_levy();
        let ens = simulate_ensemble(&grid, &levy, 2, 32, 9).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        let back = PathEnsemble::read_binary(&mut buf.as_slice(), &grid, &levy).unwrap();
        assert_eq!(ens.dw, back.dw);
        assert_eq!(ens.jump_counts, back.jump_counts);
        assert_eq!(ens.w_at, back.w_at);
        assert_eq!(ens.jump_value_at, back.jump_value_at);
        assert_eq!(ens.seed(), back.seed());
    }

    #[test]
    fn cumulative_state_consistent() {
        let grid = build_grid(0.5, 0.1, 12).unwrap();
        let levy = test_levy();
        let ens = simulate_ensemble(&grid, &levy, 1, 16, 5).unwrap();
        for p in 0..16 {
            let mut w = 0.0;
            let mut jv = 0.0;
            for i in 0..grid.last_index() {
                assert!((ens.brownian_at(p, i, 0) - w).abs() < 1e-12);
                assert!((ens.jump_value_at(p, i) - jv).abs() < 1e-12);
                w += ens.dw(p, i, 0);
                jv += ens.weighted_jump_integral(p, i);
            }
        }
    }
}
