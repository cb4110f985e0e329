//! Shared weighted least-squares estimation and its exact error theory:
//! bias/variance/noise decomposition, the beneficial-transfer condition,
//! globally optimal task weights, and plug-in estimation from data.
//!
//! Throughout, `D` abbreviates the variance ratio `d / (N - d - 1)` and the
//! *weighted gap* is `||Sigma_x^{1/2} (w_aux - w_m)||^2`, the covariance-
//! weighted distance between the proportion-blended auxiliary vector and the
//! main-task vector.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Dataset, TaskEnsemble};

/// Auxiliary task weights in both parameterizations: raw `lambda_k >= 0`
/// and (total, proportions-on-the-simplex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    lambdas: Vec<f64>,
    total: f64,
}

impl WeightConfig {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return Err(Error::InvalidInput(
                "weights: lambdas must be finite and >= 0".into(),
            ));
        }
        let total = lambdas.iter().sum();
        Ok(Self { lambdas, total })
    }

    /// All-zero weights: the no-auxiliary (main-task-only) configuration.
    pub fn none(k: usize) -> Self {
        Self {
            lambdas: vec![0.0; k],
            total: 0.0,
        }
    }

    /// Weights `total * proportions` from the simplex parameterization.
    pub fn from_proportions(total: f64, proportions: &[f64]) -> Result<Self> {
        if !total.is_finite() || total < 0.0 {
            return Err(Error::InvalidInput("weights: total must be >= 0".into()));
        }
        Self::new(proportions.iter().map(|p| total * p).collect())
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn num_aux(&self) -> usize {
        self.lambdas.len()
    }

    /// Total auxiliary mass `Lambda`.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Simplex proportions `lambda_k / Lambda`; `None` when `Lambda = 0`.
    pub fn proportions(&self) -> Option<Vec<f64>> {
        if self.total > 0.0 {
            Some(self.lambdas.iter().map(|l| l / self.total).collect())
        } else {
            None
        }
    }

    /// Diagonal `(K+1) x (K+1)` weight matrix `diag(sqrt(lambda_1), ...,
    /// sqrt(lambda_K), 1)`; the last entry is exactly 1.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let k = self.lambdas.len();
        let mut m = DMatrix::zeros(k + 1, k + 1);
        for (i, &l) in self.lambdas.iter().enumerate() {
            m[(i, i)] = l.sqrt();
        }
        m[(k, k)] = 1.0;
        m
    }
}

/// Expected main-task generalization error split into its three terms;
/// `total` is their exact sum by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub variance: f64,
    pub bias: f64,
    pub noise: f64,
    pub total: f64,
}

impl ErrorDecomposition {
    fn new(variance: f64, bias: f64, noise: f64) -> Self {
        Self {
            variance,
            bias,
            noise,
            total: variance + bias + noise,
        }
    }
}

/// Outcome of the beneficial-transfer test `L * Lambda < R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityVerdict {
    /// Slope of the condition in the total weight.
    pub l: f64,
    /// Right-hand side `2 sigma_m^2 d / (N - d - 1)`.
    pub r: f64,
    /// Whether the evaluated total weight satisfies the condition.
    pub beneficial_for_given: bool,
    /// Largest beneficial total weight `R / L`; infinite when `L <= 0`.
    pub lambda_cap: f64,
}

/// Projected-gradient-descent controls for the simplex program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdSettings {
    /// Step size; defaults to `1 / (2 L)` with `L` the gradient Lipschitz
    /// bound `2 D max sigma_k^2 + 2 ||W_aux^T Sigma_x W_aux||`.
    pub step: Option<f64>,
    /// Stop when the projected gradient map norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PgdSettings {
    fn default() -> Self {
        Self {
            step: None,
            tol: 1e-10,
            max_iters: 100_000,
        }
    }
}

/// Globally optimal task weights in the simplex parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalWeights {
    /// Optimal proportions on the simplex.
    pub proportions_star: Vec<f64>,
    /// Optimal total weight; infinite when the objective minimum is zero.
    pub total_star: f64,
    /// Recovered raw weights `total_star * proportions_star`.
    pub lambdas_star: Vec<f64>,
    /// Objective value at the optimal proportions.
    pub f_value: f64,
    /// True when `f = 0` (exact representability with zero noise) makes the
    /// optimal total weight unbounded.
    pub unbounded_weight: bool,
    /// True when the objective Hessian restricted to the simplex tangent
    /// space is numerically singular: the minimizer may not be unique.
    pub non_unique: bool,
    pub iterations: usize,
    pub gradient_map_norm: f64,
}

fn variance_ratio(d: usize, n: usize) -> Result<f64> {
    if n <= d + 1 {
        return Err(Error::SampleSize { n, d, min: d + 1 });
    }
    Ok(d as f64 / (n - d - 1) as f64)
}

fn check_weights(ens: &TaskEnsemble, w: &WeightConfig) -> Result<()> {
    if w.num_aux() != ens.num_aux() {
        return Err(Error::InvalidInput(format!(
            "weights: {} lambdas for {} auxiliary tasks",
            w.num_aux(),
            ens.num_aux()
        )));
    }
    Ok(())
}

/// `||Sigma_x^{1/2} (w_aux - w_m)||^2` for proportions on the simplex.
fn weighted_gap_sq(ens: &TaskEnsemble, proportions: &[f64]) -> f64 {
    let k = ens.num_aux();
    let mut w_aux = DVector::zeros(ens.dim());
    for (j, &p) in proportions.iter().enumerate().take(k) {
        w_aux += ens.true_w().column(j) * p;
    }
    let delta = w_aux - ens.main_w();
    (ens.sigma_x() * &delta).dot(&delta)
}

/// Per-task ordinary least squares, all columns at once.
pub(crate) fn ols_all(data: &Dataset) -> Result<DMatrix<f64>> {
    let xtx = data.x().transpose() * data.x();
    let chol = Cholesky::new(xtx).ok_or_else(|| {
        Error::Singular("ols: X^T X is not positive definite".into())
    })?;
    let xty = data.x().transpose() * data.y();
    Ok(chol.solve(&xty))
}

/// The shared estimator: a convex combination of the per-task OLS
/// solutions, `(OLS_m + sum_k lambda_k OLS_k) / (1 + Lambda)`.
pub fn shared_estimator(data: &Dataset, w: &WeightConfig) -> Result<DVector<f64>> {
    if w.num_aux() != data.num_aux() {
        return Err(Error::InvalidInput(format!(
            "weights: {} lambdas for {} auxiliary tasks",
            w.num_aux(),
            data.num_aux()
        )));
    }
    let b = ols_all(data)?;
    let k = data.num_aux();
    let mut est = b.column(k).clone_owned();
    for (j, &l) in w.lambdas().iter().enumerate() {
        est += b.column(j) * l;
    }
    Ok(est / (1.0 + w.total()))
}

/// Exact expected main-task generalization error of the shared estimator.
///
/// The variance term is `(sigma_m^2 + sum lambda_k^2 sigma_k^2) D /
/// (1 + Lambda)^2`, the bias term `(Lambda / (1 + Lambda))^2` times the
/// weighted gap, and the noise term `sigma_m^2`. With `Lambda = 0` the bias
/// vanishes and the same expression is the main-task-only error; there is
/// no separate formula path.
pub fn closed_form_error(
    ens: &TaskEnsemble,
    w: &WeightConfig,
    n: usize,
) -> Result<ErrorDecomposition> {
    check_weights(ens, w)?;
    let ratio = variance_ratio(ens.dim(), n)?;
    let sigma_m = ens.main_sigma();
    let total = w.total();

    let mut weighted_noise = sigma_m * sigma_m;
    for (j, &l) in w.lambdas().iter().enumerate() {
        let s = ens.noise_sigmas()[j];
        weighted_noise += l * l * s * s;
    }
    let shrink = 1.0 + total;
    let variance = weighted_noise * ratio / (shrink * shrink);
    let bias = match w.proportions() {
        Some(props) => {
            let factor = total / shrink;
            factor * factor * weighted_gap_sq(ens, &props)
        }
        None => 0.0,
    };
    Ok(ErrorDecomposition::new(variance, bias, sigma_m * sigma_m))
}

/// Main-task-only error (`Lambda = 0`), computed through the same code path.
pub fn baseline_error(ens: &TaskEnsemble, n: usize) -> Result<ErrorDecomposition> {
    closed_form_error(ens, &WeightConfig::none(ens.num_aux()), n)
}

/// Necessary-and-sufficient condition for the weighted configuration to
/// beat main-task-only training: `L * Lambda < R` with
/// `L = (sum lambda'^2 sigma_k^2 - sigma_m^2) D + gap` and
/// `R = 2 sigma_m^2 D`. Requires `Lambda > 0` so the proportions exist.
pub fn utility_condition(ens: &TaskEnsemble, w: &WeightConfig, n: usize) -> Result<UtilityVerdict> {
    check_weights(ens, w)?;
    let ratio = variance_ratio(ens.dim(), n)?;
    let props = w.proportions().ok_or_else(|| {
        Error::InvalidInput("utility_condition: total weight must be positive".into())
    })?;
    let sigma_m = ens.main_sigma();
    let mut composite = 0.0;
    for (j, &p) in props.iter().enumerate() {
        let s = ens.noise_sigmas()[j];
        composite += p * p * s * s;
    }
    let l = (composite - sigma_m * sigma_m) * ratio + weighted_gap_sq(ens, &props);
    let r = 2.0 * sigma_m * sigma_m * ratio;
    let lambda_cap = if l > 0.0 { r / l } else { f64::INFINITY };
    Ok(UtilityVerdict {
        l,
        r,
        beneficial_for_given: l * w.total() < r,
        lambda_cap,
    })
}

/// Quadratic data of the simplex weight objective
/// `f(a) = D sum a_k^2 sigma_k^2 + (W_aux a - w_m)^T Sigma_x (W_aux a - w_m)`,
/// stored as `f(a) = a^T A a - 2 b^T a + c`. Exposed so callers can verify
/// the solver against independent oracles (grids, finite differences).
#[derive(Debug, Clone)]
pub struct SimplexObjective {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    lipschitz: f64,
}

impl SimplexObjective {
    pub fn new(ens: &TaskEnsemble, n: usize) -> Result<Self> {
        let ratio = variance_ratio(ens.dim(), n)?;
        Ok(Self::with_ratio(ens, ratio))
    }

    fn with_ratio(ens: &TaskEnsemble, ratio: f64) -> Self {
        let k = ens.num_aux();
        let w_aux = ens.true_w().columns(0, k).clone_owned();
        let sig_w = ens.sigma_x() * &w_aux;
        let gram = w_aux.transpose() * &sig_w;
        let mut a = gram.clone();
        let mut max_noise_sq = 0.0f64;
        for j in 0..k {
            let s = ens.noise_sigmas()[j];
            a[(j, j)] += ratio * s * s;
            max_noise_sq = max_noise_sq.max(s * s);
        }
        let b = sig_w.transpose() * ens.main_w();
        let c = (ens.sigma_x() * ens.main_w()).dot(&ens.main_w());
        let lipschitz = 2.0 * ratio * max_noise_sq + 2.0 * crate::mat::spectral_norm(&gram);
        Self { a, b, c, lipschitz }
    }

    pub fn num_aux(&self) -> usize {
        self.a.nrows()
    }

    pub fn value(&self, alpha: &[f64]) -> f64 {
        self.value_vec(&DVector::from_column_slice(alpha))
    }

    pub fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        self.gradient_vec(&DVector::from_column_slice(alpha))
            .iter()
            .copied()
            .collect()
    }

    fn value_vec(&self, alpha: &DVector<f64>) -> f64 {
        (&self.a * alpha).dot(alpha) - 2.0 * self.b.dot(alpha) + self.c
    }

    fn gradient_vec(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.a * alpha * 2.0 - &self.b * 2.0
    }

    /// Smallest eigenvalue of the Hessian `2A` restricted to the simplex
    /// tangent space (directions summing to zero).
    fn tangent_hessian_min_eig(&self) -> f64 {
        let k = self.a.nrows();
        if k < 2 {
            return f64::INFINITY;
        }
        let mut seed = DMatrix::zeros(k, k);
        seed.column_mut(0).fill(1.0);
        for j in 1..k {
            seed[(j, j)] = 1.0;
        }
        let q = seed.qr().q();
        let tangent = q.columns(1, k - 1).clone_owned();
        let restricted = tangent.transpose() * (&self.a * 2.0) * &tangent;
        nalgebra::SymmetricEigen::new(restricted)
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &l| m.min(l))
    }
}

/// Optimal total weight is reported as unbounded beyond this value.
const UNBOUNDED_TOTAL: f64 = 1e12;

/// Globally optimal task weights: minimize the convex quadratic `f` over
/// the simplex by projected gradient descent with analytic gradient, then
/// recover the scale `Lambda* = sigma_m^2 D / f(lambda'*)`. For `K = 1` the
/// proportion is exactly 1 and no iterations run.
pub fn optimal_weights(
    ens: &TaskEnsemble,
    n: usize,
    settings: &PgdSettings,
) -> Result<OptimalWeights> {
    let k = ens.num_aux();
    if k == 0 {
        return Err(Error::InvalidInput(
            "optimal_weights: at least one auxiliary task required".into(),
        ));
    }
    let ratio = variance_ratio(ens.dim(), n)?;
    let objective = SimplexObjective::with_ratio(ens, ratio);

    let (alpha, iterations, gradient_map_norm) = if k == 1 {
        (DVector::from_element(1, 1.0), 0, 0.0)
    } else {
        let step = settings
            .step
            .unwrap_or_else(|| 0.5 / objective.lipschitz.max(f64::MIN_POSITIVE));
        let mut alpha = DVector::from_element(k, 1.0 / k as f64);
        let mut iterations = 0;
        let mut map_norm = f64::INFINITY;
        while iterations < settings.max_iters {
            let grad = objective.gradient_vec(&alpha);
            let moved = &alpha - &grad * step;
            let projected = DVector::from_vec(crate::mat::simplex_project(moved.as_slice())?);
            map_norm = (&alpha - &projected).norm() / step;
            alpha = projected;
            iterations += 1;
            if map_norm < settings.tol {
                break;
            }
        }
        (alpha, iterations, map_norm)
    };

    let f_value = objective.value_vec(&alpha).max(0.0);
    let sigma_m = ens.main_sigma();
    let scale_num = sigma_m * sigma_m * ratio;
    let total_star = if f_value > 0.0 { scale_num / f_value } else { f64::INFINITY };
    let unbounded_weight = total_star > UNBOUNDED_TOTAL;
    let total_star = if unbounded_weight { f64::INFINITY } else { total_star };
    let lambdas_star = alpha
        .iter()
        .map(|&p| {
            if unbounded_weight {
                if p > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                total_star * p
            }
        })
        .collect();

    Ok(OptimalWeights {
        proportions_star: alpha.iter().copied().collect(),
        total_star,
        lambdas_star,
        f_value,
        unbounded_weight,
        non_unique: objective.tangent_hessian_min_eig() < 1e-10,
        iterations,
        gradient_map_norm,
    })
}

/// Plug-in population estimates from one dataset: per-task OLS vectors,
/// residual noise variances `||Y_t - X w_t||^2 / (N - d)` and the sample
/// covariance `X^T X / N` (kept unnormalized; it converges to the unit-norm
/// population covariance).
pub fn plugin_params(data: &Dataset) -> Result<TaskEnsemble> {
    let (n, d) = (data.n(), data.dim());
    let w_hat = ols_all(data)?;
    let resid = data.y() - data.x() * &w_hat;
    let sigmas: Vec<f64> = (0..data.y().ncols())
        .map(|t| (resid.column(t).norm_squared() / (n - d) as f64).sqrt())
        .collect();
    let sigma_hat = data.x().transpose() * data.x() / n as f64;
    TaskEnsemble::from_estimates(sigma_hat, w_hat, sigmas)
}

/// Optimal weights evaluated at the plug-in estimates, with `N` taken from
/// the dataset.
pub fn estimated_optimal_weights(data: &Dataset, settings: &PgdSettings) -> Result<OptimalWeights> {
    let ens = plugin_params(data)?;
    optimal_weights(&ens, data.n(), settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::taskgen::{make_ensemble, sample_dataset, CovarianceKind, EnsembleSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn spec(d: usize, k: usize, tilde: f64, noise: Vec<f64>) -> EnsembleSpec {
        EnsembleSpec {
            n: 100,
            d,
            k,
            main_scale: 5.0,
            tilde_sigmas: vec![tilde; k],
            noise_sigmas: noise,
            covariance: CovarianceKind::Identity,
        }
    }

    fn ensemble_from(w_cols: Vec<DVector<f64>>, sigmas: Vec<f64>) -> TaskEnsemble {
        let d = w_cols[0].len();
        let mut w = DMatrix::zeros(d, w_cols.len());
        for (j, c) in w_cols.iter().enumerate() {
            w.set_column(j, c);
        }
        TaskEnsemble::new(DMatrix::identity(d, d), w, sigmas).unwrap()
    }

    #[test]
    fn weight_config_parameterizations() {
        let w = WeightConfig::new(vec![1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(w.total(), 4.0);
        let p = w.proportions().unwrap();
        assert_abs_diff_eq!(p[0], 0.25);
        assert_abs_diff_eq!(p[1], 0.75);
        let m = w.weight_matrix();
        assert_eq!(m.nrows(), 3);
        assert_abs_diff_eq!(m[(0, 0)], 1.0);
        assert_abs_diff_eq!(m[(1, 1)], 3.0f64.sqrt());
        assert_eq!(m[(2, 2)], 1.0);

        assert!(WeightConfig::none(2).proportions().is_none());
        assert!(WeightConfig::new(vec![-0.5]).is_err());
    }

    #[test]
    fn shared_estimator_averages_ols_solutions() {
        // I_2 padded with two zero rows so the dataset size invariant
        // holds; the OLS solutions are unchanged.
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let data = Dataset::from_parts(x, y).unwrap();
        let est = shared_estimator(&data, &WeightConfig::new(vec![1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(est[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(est[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn shared_estimator_without_auxiliaries_is_plain_ols() {
        let ens = make_ensemble(&spec(5, 0, 0.0, vec![2.0]), &RngStream::new(1, 0)).unwrap();
        let data = sample_dataset(&ens, 40, &RngStream::new(1, 1)).unwrap();
        let est = shared_estimator(&data, &WeightConfig::none(0)).unwrap();
        let ols = ols_all(&data).unwrap();
        assert!((est - ols.column(0)).norm() < 1e-12);
    }

    // Limit check: a huge auxiliary weight pins the estimator to the
    // auxiliary OLS solution.
    #[test]
    fn shared_estimator_limits_to_auxiliary_ols() {
        let ens = make_ensemble(&spec(6, 1, 1.0, vec![1.0, 2.0]), &RngStream::new(2, 0)).unwrap();
        let data = sample_dataset(&ens, 60, &RngStream::new(2, 1)).unwrap();
        let est = shared_estimator(&data, &WeightConfig::new(vec![1e6]).unwrap()).unwrap();
        let ols = ols_all(&data).unwrap();
        assert!((est - ols.column(0)).norm() < 1e-3);
    }

    #[test]
    fn baseline_error_small_case() {
        let ens = ensemble_from(
            vec![DVector::from_vec(vec![1.0, 0.0])],
            vec![1.0],
        );
        // Single task (K = 0): d = 2, N = 5, sigma_m = 1.
        let e0 = baseline_error(&ens, 5).unwrap();
        assert_abs_diff_eq!(e0.variance, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e0.bias, 0.0);
        assert_abs_diff_eq!(e0.noise, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e0.total, 2.0, epsilon = 1e-12);
    }

    // Reference parameters: d = 80, N = 100, sigma_m = 10 give
    // 100 * 80/19 + 100 = 8000/19 + 100.
    #[test]
    fn baseline_error_reference_parameters() {
        let ens = make_ensemble(&spec(80, 1, 5.0, vec![1.0, 10.0]), &RngStream::new(3, 0)).unwrap();
        let e0 = baseline_error(&ens, 100).unwrap();
        assert_abs_diff_eq!(e0.total, 8000.0 / 19.0 + 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e0.total, 521.0526315789474, epsilon = 1e-9);
    }

    #[test]
    fn identical_tasks_halve_the_variance() {
        let w_m = DVector::from_vec(vec![3.0, -1.0, 2.0]);
        let ens = ensemble_from(vec![w_m.clone(), w_m], vec![2.0, 2.0]);
        let n = 20;
        let e0 = baseline_error(&ens, n).unwrap();
        let ek = closed_form_error(&ens, &WeightConfig::new(vec![1.0]).unwrap(), n).unwrap();
        assert_abs_diff_eq!(ek.variance, e0.variance / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ek.bias, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn closed_form_requires_enough_samples() {
        let ens = make_ensemble(&spec(5, 1, 1.0, vec![1.0, 1.0]), &RngStream::new(4, 0)).unwrap();
        assert!(matches!(
            closed_form_error(&ens, &WeightConfig::none(1), 6),
            Err(Error::SampleSize { .. })
        ));
    }

    #[test]
    fn perfect_clean_auxiliary_is_always_beneficial() {
        let w_m = DVector::from_vec(vec![1.0, 2.0]);
        let ens = ensemble_from(vec![w_m.clone(), w_m], vec![0.0, 1.0]);
        let v = utility_condition(&ens, &WeightConfig::new(vec![5.0]).unwrap(), 10).unwrap();
        assert!(v.l < 0.0);
        assert!(v.lambda_cap.is_infinite());
        assert!(v.beneficial_for_given);
    }

    // Frozen arithmetic: d = 80, N = 100, sigma_m = 10, sigma_1 = 1 and a
    // weighted gap of exactly 500 give L = 1580/19, R = 16000/19 and a cap
    // of 16000/1580.
    #[test]
    fn utility_condition_frozen_arithmetic() {
        let d = 80;
        let mut w1 = DVector::zeros(d);
        w1[0] = 500.0f64.sqrt();
        let ens = ensemble_from(vec![w1, DVector::zeros(d)], vec![1.0, 10.0]);
        let v = utility_condition(&ens, &WeightConfig::new(vec![1.0]).unwrap(), 100).unwrap();
        assert_abs_diff_eq!(v.l, 1580.0 / 19.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v.r, 16000.0 / 19.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v.lambda_cap, 16000.0 / 1580.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v.lambda_cap, 10.126582278481013, epsilon = 1e-9);
    }

    // The verdict must agree with the sign of E_K - E_0 computed from the
    // closed forms, for random ensembles and random weights.
    #[test]
    fn verdict_agrees_with_closed_form_comparison() {
        let mut checked = 0;
        for i in 0..40u64 {
            let k = 1 + (i % 3) as usize;
            let sp = spec(6, k, 0.5 + (i % 5) as f64, {
                let mut s: Vec<f64> = (0..k).map(|j| 0.5 + j as f64).collect();
                s.push(3.0);
                s
            });
            let ens = make_ensemble(&sp, &RngStream::new(100 + i, 0)).unwrap();
            let n = 16;
            let lambdas: Vec<f64> = (0..k)
                .map(|j| 0.05 + ((i as usize + j) % 7) as f64 * 0.6)
                .collect();
            let w = WeightConfig::new(lambdas).unwrap();
            let ek = closed_form_error(&ens, &w, n).unwrap().total;
            let e0 = baseline_error(&ens, n).unwrap().total;
            if (ek - e0).abs() < 1e-10 * e0.abs().max(1.0) {
                continue; // boundary: either verdict is acceptable
            }
            let v = utility_condition(&ens, &w, n).unwrap();
            assert_eq!(v.beneficial_for_given, ek < e0, "case {i}: ek={ek} e0={e0}");
            checked += 1;
        }
        assert!(checked > 30);
    }

    // Zero model gap: the optimal total weight is the noise ratio
    // sigma_m^2 / sigma_1^2 regardless of N and d.
    #[test]
    fn optimal_weights_k1_zero_gap() {
        let w_m = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let ens = ensemble_from(vec![w_m.clone(), w_m], vec![1.0, 10.0]);
        let opt = optimal_weights(&ens, 50, &PgdSettings::default()).unwrap();
        assert_eq!(opt.proportions_star, vec![1.0]);
        assert_abs_diff_eq!(opt.total_star, 100.0, epsilon = 1e-10);
        assert_abs_diff_eq!(opt.lambdas_star[0], 100.0, epsilon = 1e-10);
        assert!(!opt.unbounded_weight);
        assert!(!opt.non_unique);
        assert_eq!(opt.iterations, 0);
    }

    // Two auxiliaries placed symmetrically about the main task with equal
    // noise: the optimum splits evenly.
    #[test]
    fn optimal_weights_symmetric_pair() {
        let w_m = DVector::from_vec(vec![2.0, 0.0, 1.0]);
        let v = DVector::from_vec(vec![0.0, 1.5, 0.0]);
        let ens = ensemble_from(vec![&w_m + &v, &w_m - &v, w_m], vec![1.0, 1.0, 4.0]);
        let opt = optimal_weights(&ens, 30, &PgdSettings::default()).unwrap();
        assert_abs_diff_eq!(opt.proportions_star[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(opt.proportions_star[1], 0.5, epsilon = 1e-8);
        assert!(opt.gradient_map_norm < 1e-9);
    }

    // Dense-grid oracle on the simplex: PGD must match the best grid value.
    #[test]
    fn optimal_weights_beats_grid_oracle() {
        let sp = spec(5, 3, 1.0, vec![0.5, 1.0, 2.0, 3.0]);
        let ens = make_ensemble(&sp, &RngStream::new(21, 0)).unwrap();
        let n = 20;
        let objective = SimplexObjective::new(&ens, n).unwrap();
        let opt = optimal_weights(&ens, n, &PgdSettings::default()).unwrap();

        let steps = 60usize;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let alpha = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                best = best.min(objective.value(&alpha));
            }
        }
        assert!(opt.f_value <= best + 1e-6, "{} vs {}", opt.f_value, best);
    }

    // Analytic gradient vs central finite differences at interior points.
    #[test]
    fn gradient_matches_finite_differences() {
        let sp = spec(6, 3, 2.0, vec![1.0, 2.0, 0.5, 3.0]);
        let ens = make_ensemble(&sp, &RngStream::new(22, 0)).unwrap();
        let objective = SimplexObjective::new(&ens, 20).unwrap();
        let mut rng = RngStream::new(22, 1).rng();
        for _ in 0..25 {
            let raw = crate::mat::standard_gaussian(3, 1, &mut rng);
            let point: Vec<f64> = crate::mat::simplex_project(raw.column(0).as_slice())
                .unwrap()
                .iter()
                .map(|p| 0.8 * p + 0.2 / 3.0)
                .collect();
            let grad = objective.gradient(&point);
            let h = 1e-5;
            for i in 0..3 {
                let mut up = point.clone();
                let mut dn = point.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (objective.value(&up) - objective.value(&dn)) / (2.0 * h);
                let denom = grad[i].abs().max(1.0);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-6,
                    "component {i}: fd {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    // First-order optimality of the recovered scale: the reduced objective
    // (c + Lambda^2 f) / (1 + Lambda)^2 is stationary at Lambda*.
    #[test]
    fn scale_is_stationary_for_reduced_objective() {
        let sp = spec(8, 2, 1.5, vec![1.0, 2.0, 5.0]);
        let ens = make_ensemble(&sp, &RngStream::new(23, 0)).unwrap();
        let n = 40;
        let opt = optimal_weights(&ens, n, &PgdSettings::default()).unwrap();
        let w_star = WeightConfig::from_proportions(opt.total_star, &opt.proportions_star).unwrap();
        let reduced = |total: f64| {
            let w = WeightConfig::from_proportions(total, &opt.proportions_star).unwrap();
            closed_form_error(&ens, &w, n).unwrap().total
        };
        let h = 1e-5 * opt.total_star.max(1.0);
        let deriv = (reduced(opt.total_star + h) - reduced(opt.total_star - h)) / (2.0 * h);
        assert!(deriv.abs() < 1e-6, "derivative at the optimum: {deriv}");
        // And the closed form at the optimum cannot beat nearby scales.
        let at_star = closed_form_error(&ens, &w_star, n).unwrap().total;
        assert!(at_star <= reduced(opt.total_star * 1.1) + 1e-12);
        assert!(at_star <= reduced(opt.total_star * 0.9) + 1e-12);
    }

    // Full two-level optimality: the closed form at the recovered
    // (total, proportions) optimum is at or below every point of a
    // (total, proportions) grid sweep, across random ensembles.
    #[test]
    fn optimum_dominates_total_by_proportion_grid() {
        for t in 0..20u64 {
            let k = 1 + (t % 3) as usize;
            let sp = spec(4 + (t % 3) as usize, k, 0.3 + 0.4 * (t % 4) as f64, {
                let mut s: Vec<f64> = (0..k).map(|j| 0.5 + 0.9 * j as f64).collect();
                s.push(2.0 + (t % 3) as f64);
                s
            });
            let ens = make_ensemble(&sp, &RngStream::new(400 + t, 0)).unwrap();
            let n = 18;
            let opt = optimal_weights(&ens, n, &PgdSettings::default()).unwrap();
            let w_star =
                WeightConfig::from_proportions(opt.total_star, &opt.proportions_star).unwrap();
            let at_star = closed_form_error(&ens, &w_star, n).unwrap().total;

            let totals: Vec<f64> = (0..15)
                .map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / 14.0))
                .collect();
            let proportions: Vec<Vec<f64>> = match k {
                1 => vec![vec![1.0]],
                2 => (0..=10)
                    .map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0])
                    .collect(),
                _ => {
                    let mut out = Vec::new();
                    for i in 0..=8 {
                        for j in 0..=(8 - i) {
                            out.push(vec![
                                i as f64 / 8.0,
                                j as f64 / 8.0,
                                (8 - i - j) as f64 / 8.0,
                            ]);
                        }
                    }
                    out
                }
            };
            for total in &totals {
                for p in &proportions {
                    let w = WeightConfig::from_proportions(*total, p).unwrap();
                    let at_grid = closed_form_error(&ens, &w, n).unwrap().total;
                    assert!(
                        at_star <= at_grid + 1e-9,
                        "ensemble {t}: optimum {at_star} beaten at total {total}, {p:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn variance_is_monotone_in_sample_size() {
        let sp = spec(10, 1, 1.0, vec![1.0, 4.0]);
        let ens = make_ensemble(&sp, &RngStream::new(24, 0)).unwrap();
        let w = WeightConfig::new(vec![0.7]).unwrap();
        let mut last = f64::INFINITY;
        for n in [13, 20, 40, 80, 160, 1000] {
            let e = closed_form_error(&ens, &w, n).unwrap();
            assert!(e.variance < last);
            last = e.variance;
        }
    }

    #[test]
    fn plugin_recovers_noiseless_parameters_exactly() {
        let sp = spec(6, 1, 2.0, vec![0.0, 0.0]);
        let ens = make_ensemble(&sp, &RngStream::new(25, 0)).unwrap();
        let data = sample_dataset(&ens, 50, &RngStream::new(25, 1)).unwrap();
        let est = plugin_params(&data).unwrap();
        assert!(est.noise_sigmas().iter().all(|&s| s < 1e-8));
        assert!((est.true_w() - ens.true_w()).norm() < 1e-8);
    }

    // Consistency at large N: noise estimates within 5%, covariance
    // estimate error roughly halving per 4x sample size.
    #[test]
    fn plugin_estimates_are_consistent() {
        let sp = spec(10, 1, 1.0, vec![2.0, 5.0]);
        let ens = make_ensemble(&sp, &RngStream::new(26, 0)).unwrap();
        let data = sample_dataset(&ens, 100_000, &RngStream::new(26, 1)).unwrap();
        let est = plugin_params(&data).unwrap();
        for (hat, truth) in est.noise_sigmas().iter().zip(ens.noise_sigmas()) {
            assert!((hat - truth).abs() <= 0.05 * truth, "{hat} vs {truth}");
        }

        let max_err = |n: usize, trial: u64| {
            let ds = sample_dataset(&ens, n, &RngStream::new(27, trial)).unwrap();
            let e = plugin_params(&ds).unwrap();
            (e.sigma_x() - ens.sigma_x())
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()))
        };
        let trials = 10;
        let mut ratio_sum = 0.0;
        for t in 0..trials {
            let coarse = max_err(1000, t);
            let fine = max_err(4000, t + 100);
            ratio_sum += fine / coarse;
        }
        let mean_ratio = ratio_sum / trials as f64;
        assert!(
            (0.3..0.8).contains(&mean_ratio),
            "error ratio per 4x N: {mean_ratio}"
        );
    }

    #[test]
    fn estimated_weights_noiseless_identical_tasks_match_oracle() {
        let sp = spec(6, 1, 0.0, vec![0.0, 0.0]);
        let ens = make_ensemble(&sp, &RngStream::new(28, 0)).unwrap();
        let data = sample_dataset(&ens, 60, &RngStream::new(28, 1)).unwrap();
        let oracle = optimal_weights(&ens, 60, &PgdSettings::default()).unwrap();
        let est = estimated_optimal_weights(&data, &PgdSettings::default()).unwrap();
        assert!(oracle.unbounded_weight && est.unbounded_weight);
        assert!(oracle.total_star.is_infinite() && est.total_star.is_infinite());
        assert_eq!(est.proportions_star, oracle.proportions_star);
    }

    #[test]
    fn estimated_weights_are_deterministic() {
        let sp = spec(5, 2, 1.0, vec![1.0, 2.0, 3.0]);
        let ens = make_ensemble(&sp, &RngStream::new(29, 0)).unwrap();
        let data = sample_dataset(&ens, 40, &RngStream::new(29, 1)).unwrap();
        let a = estimated_optimal_weights(&data, &PgdSettings::default()).unwrap();
        let b = estimated_optimal_weights(&data, &PgdSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_objective_sets_non_unique_flag() {
        // Two identical clean auxiliaries: any split is optimal.
        let w_m = DVector::from_vec(vec![1.0, 2.0]);
        let aux = DVector::from_vec(vec![1.0, 1.0]);
        let ens = ensemble_from(vec![aux.clone(), aux, w_m], vec![0.0, 0.0, 1.0]);
        let opt = optimal_weights(&ens, 10, &PgdSettings::default()).unwrap();
        assert!(opt.non_unique);
    }
}
