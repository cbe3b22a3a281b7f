//! Empirical measures, the 2-Wasserstein distance, and the finite-particle
//! estimator of the measure derivative.
//!
//! Laws are represented exclusively as uniform empirical measures over the
//! particle cloud. On the real line the distance between two equal-size
//! clouds is exact (sorted coupling); in higher dimension an exact
//! assignment solver is provided for small clouds as an oracle.

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Uniform empirical measure over `n` samples in `R^dim`, row-major.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    samples: Vec<f64>,
    mean: OnceLock<Vec<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, samples: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Measure("dimension must be >= 1".into()));
        }
        if samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::Measure(format!(
                "sample buffer length {} incompatible with dimension {dim}",
                samples.len()
            )));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Measure("non-finite sample coordinate".into()));
        }
        Ok(EmpiricalMeasure {
            dim,
            samples,
            mean: OnceLock::new(),
        })
    }

    /// One-dimensional cloud.
    pub fn scalar(samples: Vec<f64>) -> Result<Self> {
        EmpiricalMeasure::new(1, samples)
    }

    /// Point mass: the single-sample measure at `point`.
    pub fn dirac(point: &[f64]) -> Self {
        EmpiricalMeasure {
            dim: point.len(),
            samples: point.to_vec(),
            mean: OnceLock::new(),
        }
    }

    /// Point mass at the origin of `R^dim`.
    pub fn dirac_zero(dim: usize) -> Self {
        EmpiricalMeasure::dirac(&vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, p: usize) -> &[f64] {
        &self.samples[p * self.dim..(p + 1) * self.dim]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Coordinate-wise sample mean, computed once and cached.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let n = self.len() as f64;
            let mut acc = vec![0.0; self.dim];
            for p in 0..self.len() {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += self.samples[p * self.dim + c];
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
            acc
        })
    }

    /// `(1/N) sum_p |x_p|^2`.
    pub fn second_moment(&self) -> f64 {
        let n = self.len() as f64;
        self.samples.iter().map(|x| x * x).sum::<f64>() / n
    }
}

/// Exact 2-Wasserstein distance between two equal-size scalar clouds:
/// sort both and couple in order.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::Measure(format!(
            "sorted coupling needs scalar clouds, got dims {} and {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.len() != nu.len() {
        return Err(Error::Measure(format!(
            "sample counts differ: {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    let mut a = mu.samples().to_vec();
    let mut b = nu.samples().to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = a.len() as f64;
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(sq.sqrt())
}

/// Maximum cloud size accepted by the exact assignment solver.
pub const SMALL_N_LIMIT: usize = 10;

/// Exact 2-Wasserstein distance between two equal-size clouds of at most
/// [`SMALL_N_LIMIT`] samples in any dimension, by optimal assignment
/// (dynamic program over subsets).
pub fn wasserstein2_exact_small_n(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Measure(format!(
            "dimension mismatch: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let n = mu.len();
    if nu.len() != n {
        return Err(Error::Measure(format!(
            "sample counts differ: {} vs {}",
            n,
            nu.len()
        )));
    }
    if n > SMALL_N_LIMIT {
        return Err(Error::Measure(format!(
            "exact assignment limited to {SMALL_N_LIMIT} samples, got {n}"
        )));
    }
    // cost[i][j] = |mu_i - nu_j|^2
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = mu.sample(i);
            let b = nu.sample(j);
            cost[i * n + j] = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
    }
    // dp[mask] = cheapest assignment of mu samples 0..popcount(mask) to the
    // nu samples in `mask`.
    let full = 1usize << n;
    let mut dp = vec![f64::INFINITY; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if dp[mask].is_infinite() {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == n {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let cand = dp[mask] + cost[i * n + j];
                if cand < dp[next] {
                    dp[next] = cand;
                }
            }
        }
    }
    Ok((dp[full - 1] / n as f64).sqrt())
}

/// Estimate the measure derivative of `phi` at the cloud `mu`, evaluated
/// at sample `p`, by a central one-particle perturbation:
///
/// ```text
/// h_c  =  N * (phi(mu with x_p += eps e_c) - phi(mu with x_p -= eps e_c)) / (2 eps)
/// ```
///
/// Perturbing a single particle by `eps` changes the lift by
/// `<h(x), zeta> = h(x_p) * eps / N` to first order, hence the factor `N`.
/// For quadratic lifts the central difference is exact.
pub fn lions_derivative_estimate<F>(
    phi: F,
    mu: &EmpiricalMeasure,
    p: usize,
    eps: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Measure(format!("perturbation eps = {eps} must be positive")));
    }
    if p >= mu.len() {
        return Err(Error::Measure(format!(
            "sample index {p} out of range (N = {})",
            mu.len()
        )));
    }
    let n = mu.len() as f64;
    let dim = mu.dim();
    let mut out = vec![0.0; dim];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut plus = mu.samples().to_vec();
        plus[p * dim + c] += eps;
        let mut minus = mu.samples().to_vec();
        minus[p * dim + c] -= eps;
        let fp = phi(&EmpiricalMeasure::new(dim, plus)?);
        let fm = phi(&EmpiricalMeasure::new(dim, minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteLift);
        }
        *slot = n * (fp - fm) / (2.0 * eps);
    }
    Ok(out)
}

/// Default perturbation size for [`lions_derivative_estimate`] at a sample
/// of the given magnitude.
pub fn default_perturbation(sample_scale: f64) -> f64 {
    1e-4 * (1.0 + sample_scale.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(vals: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::scalar(vals.to_vec()).unwrap()
    }

    #[test]
    fn w2_translation() {
        let d = wasserstein2_1d(&cloud(&[0.0, 2.0]), &cloud(&[1.0, 3.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w2_identity() {
        let mu = cloud(&[0.3, -1.2, 4.0]);
        assert_eq!(wasserstein2_1d(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn w2_sorted_coupling() {
        // {0,0} vs {0,2}: coupling 0->0, 0->2, sqrt(4/2) = sqrt(2).
        let d = wasserstein2_1d(&cloud(&[0.0, 0.0]), &cloud(&[0.0, 2.0])).unwrap();
        assert!((d - 2.0_f64.sqrt()).abs() < 1e-15);
        let e = wasserstein2_exact_small_n(&cloud(&[0.0, 0.0]), &cloud(&[0.0, 2.0])).unwrap();
        assert!((d - e).abs() < 1e-12);
    }

    #[test]
    fn small_n_same_multiset_is_zero() {
        let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let nu = EmpiricalMeasure::new(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(wasserstein2_exact_small_n(&mu, &nu).unwrap() < 1e-15);
    }

    #[test]
    fn small_n_single_point_euclidean() {
        let mu = EmpiricalMeasure::dirac(&[0.0, 0.0]);
        let nu = EmpiricalMeasure::dirac(&[3.0, 4.0]);
        assert!((wasserstein2_exact_small_n(&mu, &nu).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn small_n_guard() {
        let mu = cloud(&[0.0; 11]);
        assert!(wasserstein2_exact_small_n(&mu, &mu).is_err());
    }

    /// Brute force over all permutations, the independent oracle for the
    /// assignment DP.
    fn w2_brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        fn permute(rest: &mut Vec<usize>, chosen: &mut Vec<usize>, best: &mut f64, cost: &dyn Fn(&[usize]) -> f64) {
            if rest.is_empty() {
                *best = best.min(cost(chosen));
                return;
            }
            for i in 0..rest.len() {
                let v = rest.remove(i);
                chosen.push(v);
                permute(rest, chosen, best, cost);
                chosen.pop();
                rest.insert(i, v);
            }
        }
        let n = mu.len();
        let cost = |perm: &[usize]| -> f64 {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| {
                    mu.sample(i)
                        .iter()
                        .zip(nu.sample(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let mut best = f64::INFINITY;
        permute(&mut (0..n).collect(), &mut Vec::new(), &mut best, &cost);
        (best / n as f64).sqrt()
    }

    #[test]
    fn second_moment_examples() {
        assert_eq!(cloud(&[0.0]).second_moment(), 0.0);
        assert!((cloud(&[1.0, -1.0]).second_moment() - 1.0).abs() < 1e-15);
        assert!((cloud(&[3.0, 4.0]).second_moment() - 12.5).abs() < 1e-15);
    }

    #[test]
    fn lions_linear_lift_is_one() {
        let phi = |m: &EmpiricalMeasure| m.mean()[0];
        let mu = cloud(&[0.4, -2.0, 7.0, 0.1]);
        for p in 0..4 {
            let h = lions_derivative_estimate(phi, &mu, p, 1e-4).unwrap();
            assert!((h[0] - 1.0).abs() < 1e-9, "h = {}", h[0]);
        }
    }

    #[test]
    fn lions_constant_lift_is_zero() {
        let phi = |_: &EmpiricalMeasure| 3.5;
        let mu = cloud(&[0.4, -2.0]);
        let h = lions_derivative_estimate(phi, &mu, 1, 1e-4).unwrap();
        assert_eq!(h[0], 0.0);
    }

    #[test]
    fn lions_quadratic_lift_is_exact() {
        let phi = |m: &EmpiricalMeasure| m.second_moment();
        let mu = cloud(&[0.4, -2.0, 7.0]);
        for (p, a) in [0.4, -2.0, 7.0].iter().enumerate() {
            let h = lions_derivative_estimate(phi, &mu, p, 1e-4).unwrap();
            assert!((h[0] - 2.0 * a).abs() < 1e-9, "h = {} vs {}", h[0], 2.0 * a);
        }
    }

    proptest! {
        #[test]
        fn one_d_matches_assignment_oracle(vals_a in prop::collection::vec(-5.0f64..5.0, 8),
                                           vals_b in prop::collection::vec(-5.0f64..5.0, 8)) {
            let mu = cloud(&vals_a);
            let nu = cloud(&vals_b);
            let d1 = wasserstein2_1d(&mu, &nu).unwrap();
            let d2 = wasserstein2_exact_small_n(&mu, &nu).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
        }

        #[test]
        fn small_n_matches_brute_force(vals_a in prop::collection::vec(-3.0f64..3.0, 10),
                                       vals_b in prop::collection::vec(-3.0f64..3.0, 10)) {
            let mu = EmpiricalMeasure::new(2, vals_a).unwrap();
            let nu = EmpiricalMeasure::new(2, vals_b).unwrap();
            let dp = wasserstein2_exact_small_n(&mu, &nu).unwrap();
            let bf = w2_brute_force(&mu, &nu);
            prop_assert!((dp - bf).abs() < 1e-12);
        }

        #[test]
        fn coupling_bound(vals_a in prop::collection::vec(-5.0f64..5.0, 16),
                          gaps in prop::collection::vec(-1.0f64..1.0, 16)) {
            let vals_b: Vec<f64> = vals_a.iter().zip(&gaps).map(|(a, g)| a + g).collect();
            let mu = cloud(&vals_a);
            let nu = cloud(&vals_b);
            let coupled = (gaps.iter().map(|g| g * g).sum::<f64>() / 16.0).sqrt();
            let w = wasserstein2_1d(&mu, &nu).unwrap();
            prop_assert!(w <= coupled + 1e-12);
        }

        #[test]
        fn symmetry_and_triangle(a in prop::collection::vec(-5.0f64..5.0, 6),
                                 b in prop::collection::vec(-5.0f64..5.0, 6),
                                 c in prop::collection::vec(-5.0f64..5.0, 6)) {
            let (ma, mb, mc) = (cloud(&a), cloud(&b), cloud(&c));
            let ab = wasserstein2_1d(&ma, &mb).unwrap();
            let ba = wasserstein2_1d(&mb, &ma).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let bc = wasserstein2_1d(&mb, &mc).unwrap();
            let ac = wasserstein2_1d(&ma, &mc).unwrap();
            prop_assert!(ac <= ab + bc + 1e-10);
            let e_ab = wasserstein2_exact_small_n(&ma, &mb).unwrap();
            let e_bc = wasserstein2_exact_small_n(&mb, &mc).unwrap();
            let e_ac = wasserstein2_exact_small_n(&ma, &mc).unwrap();
            prop_assert!((e_ab - wasserstein2_exact_small_n(&mb, &ma).unwrap()).abs() < 1e-12);
            prop_assert!(e_ac <= e_ab + e_bc + 1e-10);
        }

        #[test]
        fn permutation_invariance(vals in prop::collection::vec(-5.0f64..5.0, 8), swap_a in 0usize..8, swap_b in 0usize..8) {
            let mu = cloud(&vals);
            let mut permuted = vals.clone();
            permuted.swap(swap_a, swap_b);
            let nu = cloud(&permuted);
            // Derived quantities ignore sample order.
            prop_assert!((mu.second_moment() - nu.second_moment()).abs() < 1e-12);
            prop_assert!(wasserstein2_1d(&mu, &nu).unwrap() < 1e-12);
            // The derivative estimator is equivariant: permuting samples and
            // the probe index together leaves the estimate unchanged.
            let phi = |m: &EmpiricalMeasure| m.second_moment() + m.mean()[0].sin();
            let h_mu = lions_derivative_estimate(phi, &mu, swap_a, 1e-4).unwrap();
            let h_nu = lions_derivative_estimate(phi, &nu, swap_b, 1e-4).unwrap();
            prop_assert!((h_mu[0] - h_nu[0]).abs() < 1e-9);
        }
    }
}
