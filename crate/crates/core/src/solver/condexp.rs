//! Regression conditional expectations.
//!
//! The conditional expectation given the time-`t_i` state is realized as a
//! least-squares projection of the per-particle values onto polynomials in
//! the state coordinates `(W_{t_i}, J_{t_i})`, where `J` is the cumulative
//! weighted compensated jump value. The intercept column is handled
//! separately (fit in deviation form, unpenalized), so constants are
//! reproduced exactly and the particle mean is preserved; ridge
//! regularization keeps the normal equations solvable when columns
//! degenerate, e.g. at `t = 0` where every regressor is zero and the fit
//! collapses to the sample mean.

use crate::noise::PathEnsemble;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Polynomial regression estimator for conditional expectations.
#[derive(Debug, Clone, Copy)]
pub struct CondExpEstimator {
    /// Total polynomial degree in the state regressors.
    pub degree: usize,
    /// Ridge parameter (relative to column scale).
    pub ridge: f64,
}

impl Default for CondExpEstimator {
    fn default() -> Self {
        CondExpEstimator {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

/// Diagnostics of one factorized step regression.
#[derive(Debug, Clone, Copy)]
pub struct RegressionDiagnostics {
    /// Number of numerically independent directions in the basis,
    /// including the intercept.
    pub effective_rank: usize,
    /// Total basis size including the intercept.
    pub n_basis: usize,
}

/// Normal equations factorized at one grid time, reusable across any
/// number of regression targets at that time.
pub struct StepRegression {
    n: usize,
    n_cols: usize,
    /// Centered monomial columns, flat `[p][b]`.
    columns: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    diagnostics: RegressionDiagnostics,
}

/// Compensated (Kahan) mean; keeps the constant-fit and mean-preservation
/// guarantees at machine precision independent of the particle count.
fn kahan_mean(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / values.len() as f64
}

/// Exponent vectors of all monomials with total degree in `1..=degree`
/// over `n_vars` variables, in a fixed deterministic order.
fn monomial_exponents(n_vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; n_vars];
    fn rec(
        var: usize,
        remaining: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if var == current.len() {
            if current.iter().sum::<usize>() >= 1 {
                out.push(current.clone());
            }
            return;
        }
        for e in 0..=remaining {
            current[var] = e;
            rec(var + 1, remaining - e, current, out);
        }
        current[var] = 0;
    }
    rec(0, degree, &mut current, &mut out);
    out
}

impl CondExpEstimator {
    /// Build and factorize the regression at grid time `i`.
    pub fn at_step(&self, ensemble: &PathEnsemble, i: usize) -> StepRegression {
        let n = ensemble.n_particles();
        let d = ensemble.brownian_dim();
        let n_vars = d + 1;
        let exponents = monomial_exponents(n_vars, self.degree.max(1));
        let n_cols = exponents.len();

        let mut columns = vec![0.0; n * n_cols];
        let mut state = vec![0.0; n_vars];
        for p in 0..n {
            for c in 0..d {
                state[c] = ensemble.brownian_at(p, i, c);
            }
            state[d] = ensemble.jump_value_at(p, i);
            for (b, expo) in exponents.iter().enumerate() {
                let mut v = 1.0;
                for (x, &e) in state.iter().zip(expo) {
                    for _ in 0..e {
                        v *= x;
                    }
                }
                columns[p * n_cols + b] = v;
            }
        }

        // Center each column (compensated means).
        let mut means = vec![0.0; n_cols];
        let mut comp = vec![0.0; n_cols];
        for p in 0..n {
            for b in 0..n_cols {
                let y = columns[p * n_cols + b] - comp[b];
                let t = means[b] + y;
                comp[b] = (t - means[b]) - y;
                means[b] = t;
            }
        }
        for m in means.iter_mut() {
            *m /= n as f64;
        }
        for p in 0..n {
            for b in 0..n_cols {
                columns[p * n_cols + b] -= means[b];
            }
        }

        // Gram matrix with a scale-aware ridge on the diagonal.
        let mut gram = DMatrix::<f64>::zeros(n_cols, n_cols);
        for p in 0..n {
            let row = &columns[p * n_cols..(p + 1) * n_cols];
            for b in 0..n_cols {
                for b2 in b..n_cols {
                    gram[(b, b2)] += row[b] * row[b2];
                }
            }
        }
        for b in 0..n_cols {
            for b2 in 0..b {
                gram[(b, b2)] = gram[(b2, b)];
            }
        }
        let diag_max = (0..n_cols).map(|b| gram[(b, b)]).fold(0.0f64, f64::max);
        let eigen = gram.clone().symmetric_eigen();
        let rank_tol = 1e-12 * diag_max.max(1.0);
        let effective_rank =
            1 + eigen.eigenvalues.iter().filter(|&&v| v > rank_tol).count();
        for b in 0..n_cols {
            let penalty = self.ridge * (1.0 + gram[(b, b)]);
            gram[(b, b)] += penalty;
        }

        let chol = Cholesky::new(gram).expect("ridge-regularized Gram matrix is positive definite");

        StepRegression {
            n,
            n_cols,
            columns,
            chol,
            diagnostics: RegressionDiagnostics {
                effective_rank,
                n_basis: n_cols + 1,
            },
        }
    }

    /// Least-squares projection of `values` onto the basis at time `i`,
    /// returned per particle.
    pub fn cond_exp(&self, ensemble: &PathEnsemble, i: usize, values: &[f64]) -> Vec<f64> {
        self.at_step(ensemble, i).fit(values)
    }

    /// Same as [`CondExpEstimator::cond_exp`], also reporting the basis
    /// diagnostics of the step.
    pub fn cond_exp_with_diagnostics(
        &self,
        ensemble: &PathEnsemble,
        i: usize,
        values: &[f64],
    ) -> (Vec<f64>, RegressionDiagnostics) {
        let reg = self.at_step(ensemble, i);
        let fitted = reg.fit(values);
        (fitted, reg.diagnostics)
    }
}

impl StepRegression {
    pub fn diagnostics(&self) -> RegressionDiagnostics {
        self.diagnostics
    }

    /// Fitted values of the projection.
    pub fn fit(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.fit_into(values, &mut out);
        out
    }

    /// Fitted values written into a caller-provided buffer.
    pub fn fit_into(&self, values: &[f64], out: &mut [f64]) {
        assert_eq!(values.len(), self.n);
        assert_eq!(out.len(), self.n);
        let mean = kahan_mean(values);
        let mut rhs = DVector::<f64>::zeros(self.n_cols);
        for p in 0..self.n {
            let dev = values[p] - mean;
            let row = &self.columns[p * self.n_cols..(p + 1) * self.n_cols];
            for b in 0..self.n_cols {
                rhs[b] += row[b] * dev;
            }
        }
        let coeffs = self.chol.solve(&rhs);
        for p in 0..self.n {
            let row = &self.columns[p * self.n_cols..(p + 1) * self.n_cols];
            let mut v = mean;
            for b in 0..self.n_cols {
                v += row[b] * coeffs[b];
            }
            out[p] = v;
        }
    }

    /// Largest violation of the normal equations by the residual of a fit,
    /// relative to the target scale (diagnostic used by tests).
    pub fn normal_equation_residual(&self, values: &[f64], fitted: &[f64]) -> f64 {
        let scale = values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        let mut worst = 0.0f64;
        // Intercept column.
        let resid_sum: f64 = values
            .iter()
            .zip(fitted)
            .map(|(v, f)| v - f)
            .sum::<f64>();
        worst = worst.max((resid_sum / self.n as f64).abs() / scale);
        for b in 0..self.n_cols {
            let mut dot = 0.0;
            let mut col_scale = 0.0f64;
            for p in 0..self.n {
                let col = self.columns[p * self.n_cols + b];
                dot += col * (values[p] - fitted[p]);
                col_scale += col * col;
            }
            let denom = (col_scale.sqrt() * scale).max(1e-300);
            worst = worst.max(dot.abs() / denom / (self.n as f64).sqrt());
        }
        worst
    }
}
