//! Under-parameterized linear networks: the reduced-rank estimator, the
//! realized signal-to-noise ratio, a column-wise low-rank perturbation bound
//! with two competitor bounds, and the expectation bound on the main-task
//! generalization error with fully computed constants.
//!
//! The perturbation subproblem: given a signal `S`, a perturbation `Z` and
//! `M = S + Z`, bound `||([M]_q - [S]_q) e_j||` for one column `j`. Writing
//! `r = (sigma_q(S) - sigma_{q+1}(S)) / ||Z||`, the column-wise bound
//! `(||S e_j|| + ||Z e_j||) / (r - 1) + ||P_U Z e_j||` holds whenever
//! `r > 1`, where `P_U` projects onto the top-`q` left singular subspace of
//! `S`. Unlike the competitors it can drop below `||Z e_j||` itself.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::WeightConfig;
use crate::taskgen::{Dataset, TaskEnsemble};

/// A rank-constrained joint fit; zero-weight tasks are excluded from the
/// weighted objective and their columns backfilled with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRankFit {
    /// `d x (K+1)` estimator matrix, auxiliary columns first, main last.
    pub w: DMatrix<f64>,
    /// Indices of auxiliary tasks dropped because their weight is exactly 0.
    pub dropped_tasks: Vec<usize>,
    /// True when the truncation cut at a numerically tied singular value.
    pub degenerate_gap: bool,
}

impl ReducedRankFit {
    /// Main-task estimator (last column).
    pub fn main(&self) -> DVector<f64> {
        self.w.column(self.w.ncols() - 1).clone_owned()
    }
}

fn cholesky_xtx(data: &Dataset) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(data.x().transpose() * data.x())
        .ok_or_else(|| Error::Singular("X^T X is not positive definite".into()))
}

/// Weighted rank-`q` least squares, `X^dagger [P_X Y L]_q L^{-1}` with `L`
/// the diagonal square-root weight matrix. For `q` at least the number of
/// active columns the truncation is the identity and every active column
/// reduces to its per-task OLS estimator.
pub fn reduced_rank_fit(data: &Dataset, w: &WeightConfig, q: usize) -> Result<ReducedRankFit> {
    let k = data.num_aux();
    if w.num_aux() != k {
        return Err(Error::InvalidInput(format!(
            "weights: {} lambdas for {k} auxiliary tasks",
            w.num_aux()
        )));
    }
    if q < 1 {
        return Err(Error::InvalidInput("reduced_rank_fit: q must be >= 1".into()));
    }

    let active: Vec<usize> = (0..k).filter(|&j| w.lambdas()[j] > 0.0).collect();
    let dropped: Vec<usize> = (0..k).filter(|&j| w.lambdas()[j] == 0.0).collect();
    let n_active = active.len() + 1;

    // Active columns of Y scaled by sqrt(lambda); main column last, weight 1.
    let mut y_act = DMatrix::zeros(data.n(), n_active);
    let mut roots = Vec::with_capacity(n_active);
    for (slot, &j) in active.iter().enumerate() {
        y_act.set_column(slot, &data.y().column(j));
        roots.push(w.lambdas()[j].sqrt());
    }
    y_act.set_column(n_active - 1, &data.y().column(k));
    roots.push(1.0);

    let chol = cholesky_xtx(data)?;
    let b_act = chol.solve(&(data.x().transpose() * &y_act));

    // M = P_X Y L = X B L, kept in the column space of X throughout. A
    // rank at or above the active column count keeps every component, which
    // reduces each active column to its per-task OLS estimator.
    let mut b_scaled = b_act;
    for (j, &r) in roots.iter().enumerate() {
        b_scaled.column_mut(j).scale_mut(r);
    }
    let m = data.x() * &b_scaled;
    let svd = m.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let q_eff = q.min(sigma.len());
    let degenerate_gap = if q_eff < sigma.len() {
        sigma[q_eff - 1] - sigma[q_eff] <= 1e-12 * sigma[0].max(1.0)
    } else {
        false
    };
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let u_q = u.columns(0, q_eff);
    let scaled_vt = DMatrix::from_fn(q_eff, n_active, |i, j| sigma[i] * v_t[(i, j)]);
    let truncated = u_q * scaled_vt;
    let mut w_act = chol.solve(&(data.x().transpose() * truncated));
    for (j, &r) in roots.iter().enumerate() {
        w_act.column_mut(j).scale_mut(1.0 / r);
    }

    let mut full = DMatrix::zeros(data.dim(), k + 1);
    for (slot, &j) in active.iter().enumerate() {
        full.set_column(j, &w_act.column(slot));
    }
    full.set_column(k, &w_act.column(n_active - 1));
    Ok(ReducedRankFit {
        w: full,
        dropped_tasks: dropped,
        degenerate_gap,
    })
}

/// Realized signal-to-noise ratio of one draw:
/// `(sigma_q(X W* L) - sigma_{q+1}(X W* L)) / ||P_X eps L||`, infinite when
/// the projected noise vanishes. The noise is recovered as `eps = Y - X W*`.
pub fn realized_snr(
    data: &Dataset,
    ens: &TaskEnsemble,
    w: &WeightConfig,
    q: usize,
) -> Result<f64> {
    let k = data.num_aux();
    if w.num_aux() != k || ens.num_aux() != k {
        return Err(Error::InvalidInput(
            "realized_snr: mismatched task counts".into(),
        ));
    }
    if q < 1 || q > k + 1 {
        return Err(Error::InvalidInput(format!(
            "realized_snr: q = {q} outside 1..={}",
            k + 1
        )));
    }
    let weight = w.weight_matrix();
    let signal = data.x() * (ens.true_w() * &weight);
    let spec = crate::mat::spectrum(&signal)?;
    let gap = spec.gap(q);

    let eps = data.y() - data.x() * ens.true_w();
    let chol = cholesky_xtx(data)?;
    let projected = data.x() * chol.solve(&(data.x().transpose() * (eps * &weight)));
    let denom = crate::mat::spectral_norm(&projected);
    if denom == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(gap / denom)
}

/// One column-perturbation problem: signal `S`, perturbation `Z`, target
/// rank `q` and a 0-based column index.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationInstance {
    s: DMatrix<f64>,
    z: DMatrix<f64>,
    q: usize,
    col: usize,
}

impl PerturbationInstance {
    pub fn new(s: DMatrix<f64>, z: DMatrix<f64>, q: usize, col: usize) -> Result<Self> {
        if s.shape() != z.shape() {
            return Err(Error::InvalidInput(format!(
                "perturbation: S is {:?} but Z is {:?}",
                s.shape(),
                z.shape()
            )));
        }
        if s.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("perturbation: non-finite entries".into()));
        }
        let p = s.nrows().min(s.ncols());
        if q < 1 || q > p {
            return Err(Error::RankOutOfRange {
                q,
                rows: s.nrows(),
                cols: s.ncols(),
            });
        }
        if col >= s.ncols() {
            return Err(Error::InvalidInput(format!(
                "perturbation: column {col} out of range for {} columns",
                s.ncols()
            )));
        }
        Ok(Self { s, z, q, col })
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// The observed matrix `M = S + Z`.
    pub fn m(&self) -> DMatrix<f64> {
        &self.s + &self.z
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn col(&self) -> usize {
        self.col
    }
}

/// Realized column error against the three bounds, plus diagnostics.
/// `ours` and `tvv` are `None` when their hypotheses (`r > 1`, `r >= 4`)
/// fail or the spectral gap is degenerate; `eym` needs no hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `||([M]_q - [S]_q) e_j||`.
    pub actual: f64,
    /// Column-wise bound `(||S e_j|| + ||Z e_j||)/(r-1) + ||P_U Z e_j||`.
    pub ours: Option<f64>,
    /// `2 (sigma_{q+1}(S) + ||Z||)`.
    pub eym: f64,
    /// `(6r/(r-2)) ||Z|| (sigma_q/gap + ln(6 sigma_1/gap))`, natural log.
    pub tvv: Option<f64>,
    /// `||Z e_j||`.
    pub z_col: f64,
    /// `||P_U Z e_j||`.
    pub proj_z_col: f64,
    /// `sigma_q(S) - sigma_{q+1}(S)`.
    pub gap: f64,
    /// Realized ratio `gap / ||Z||`; infinite when `Z = 0`.
    pub snr: f64,
    /// `||P_U(M) - P_U(S)||`, the top-subspace rotation.
    pub projector_distance: f64,
}

fn evaluate_bounds(inst: &PerturbationInstance) -> Result<BoundReport> {
    let q = inst.q;
    let j = inst.col;
    let svd_s = inst.s.clone().svd(true, false);
    let sig_s: Vec<f64> = svd_s.singular_values.iter().copied().collect();
    let u_s = svd_s.u.expect("svd u");
    let p = sig_s.len();
    let next = if q < p { sig_s[q] } else { 0.0 };
    let gap = sig_s[q - 1] - next;
    let degenerate = gap <= 1e-12 * sig_s[0].max(1.0);

    let z_norm = crate::mat::spectral_norm(&inst.z);
    let snr = if z_norm == 0.0 { f64::INFINITY } else { gap / z_norm };

    let s_col = inst.s.column(j).norm();
    let z_col = inst.z.column(j).norm();
    let u_q = u_s.columns(0, q);
    let proj_z_col = (u_q.transpose() * inst.z.column(j)).norm();

    let m = inst.m();
    let svd_m = m.clone().svd(true, false);
    let u_m = svd_m.u.expect("svd u");
    let uhat_q = u_m.columns(0, q);

    // [A]_q e_j = U_q (U_q^T (A e_j)) for the top-q projector of A itself.
    let s_q_col = u_q * (u_q.transpose() * inst.s.column(j));
    let m_q_col = uhat_q * (uhat_q.transpose() * m.column(j));
    let actual = (m_q_col - s_q_col).norm();

    // ||P_hat - P|| = sin(theta_max) from the principal angles.
    let overlap = u_q.transpose() * uhat_q;
    let cos_min = crate::mat::spectrum(&overlap)?.min().clamp(0.0, 1.0);
    let projector_distance = (1.0 - cos_min * cos_min).max(0.0).sqrt();

    let (ours, tvv) = if z_norm == 0.0 {
        (Some(0.0), Some(0.0))
    } else if degenerate {
        (None, None)
    } else {
        let ours = if snr > 1.0 {
            Some((s_col + z_col) / (snr - 1.0) + proj_z_col)
        } else {
            None
        };
        let tvv = if snr >= 4.0 {
            let coeff = 6.0 * snr / (snr - 2.0);
            Some(coeff * z_norm * (sig_s[q - 1] / gap + (6.0 * sig_s[0] / gap).ln()))
        } else {
            None
        };
        (ours, tvv)
    };

    Ok(BoundReport {
        actual,
        ours,
        eym: 2.0 * (next + z_norm),
        tvv,
        z_col,
        proj_z_col,
        gap,
        snr,
        projector_distance,
    })
}

/// Evaluate the column-wise bound (with diagnostics) on one instance.
pub fn column_bound_ours(inst: &PerturbationInstance) -> Result<BoundReport> {
    evaluate_bounds(inst)
}

/// Evaluate the competitor bounds (with diagnostics) on one instance.
pub fn competitor_bounds(inst: &PerturbationInstance) -> Result<BoundReport> {
    evaluate_bounds(inst)
}

/// The four moment constants entering the generalization bound, evaluated
/// exactly from the Gaussian tail integrals (`provenance` records whether
/// they are these defaults or caller overrides).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Exact evaluation of the Gaussian tail-integral derivations.
    GaussianExact,
    /// Caller-supplied values (e.g. from an experiment config).
    Override,
}

/// Second-moment constant of the spectral norm of an `m x n` standard
/// Gaussian matrix: with `c2 = sqrt(m) + sqrt(n)` (and unit row norm bound
/// `c1 = 1`), `E||A||^2 <= c2^2 + 2 sqrt(pi) c1 c2 + 2 c1^2`.
fn gaussian_sq_norm_constant(m: usize, n: usize) -> f64 {
    let c2 = (m as f64).sqrt() + (n as f64).sqrt();
    c2 * c2 + 2.0 * std::f64::consts::PI.sqrt() * c2 + 2.0
}

/// Gamma-sum constant of the fourth-moment tail integral:
/// `sum_{k=1}^{3} C(3,k) Gamma((k+1)/2) = 3 + 3 sqrt(pi)/2 + 1`.
fn gamma_sum_p4() -> f64 {
    4.0 + 1.5 * std::f64::consts::PI.sqrt()
}

/// Expectation bound on the squared pseudoinverse norm of an `n x d`
/// standard Gaussian matrix: `E||G^dagger||^2 <= e^2 n / (n - d - 1)^2`.
pub fn pinv_moment_bound(n: usize, d: usize) -> Result<f64> {
    if n <= d + 1 {
        return Err(Error::SampleSize { n, d, min: d + 1 });
    }
    let e2 = std::f64::consts::E * std::f64::consts::E;
    Ok(e2 * n as f64 / ((n - d - 1) as f64 * (n - d - 1) as f64))
}

/// Bound on `E ||P_X eps||^2 / sigma^2` for a rank-`d` projection of an
/// isotropic Gaussian vector; equals `C_1 d` in the generalization bound.
pub fn projected_noise_bound(d: usize) -> f64 {
    gaussian_sq_norm_constant(d, 1)
}

pub(crate) fn default_constants(d: usize, q: usize) -> MomentConstants {
    let e2 = std::f64::consts::E * std::f64::consts::E;
    MomentConstants {
        c1: gaussian_sq_norm_constant(d, 1) / d as f64,
        c2: gaussian_sq_norm_constant(q, 1) / q as f64,
        c3: e2,
        c4: e2 * gamma_sum_p4().sqrt(),
    provenance: Provenance::GaussianExact,
    }
}

/// Per-instance exact constants `(C1, C2, C3, C4)`: `C1` from the `d`-dim
/// projected-noise moment, `C2` from the `q`-dim one, `C3 = e^2` from the
/// second pseudoinverse moment, and `C4 = e^2 sqrt(gamma-sum)` assembling
/// the fourth moments via Cauchy-Schwarz. Requires `N > d + 3` so the
/// fourth pseudoinverse moment is finite.
pub fn moment_constants(n: usize, d: usize, q: usize) -> Result<MomentConstants> {
    if n <= d + 3 {
        return Err(Error::SampleSize { n, d, min: d + 3 });
    }
    if d == 0 || q == 0 {
        return Err(Error::InvalidInput("moment_constants: d, q must be >= 1".into()));
    }
    Ok(default_constants(d, q))
}

/// The assembled generalization bound and its pieces; `total` is exactly
/// `t1 + t2 + t3 + noise`. When the hypotheses fail (`r <= 1` or
/// `N <= d + 3`) the report is flagged inapplicable and the terms are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenBoundReport {
    /// Truncation-loss term, scaling with `sigma_{q+1}^2(W* L)`.
    pub t1: f64,
    /// Subspace-rotation term, scaling with `(||w_m|| / (r-1))^2`.
    pub t2: f64,
    /// Variance-like term of order `d / N`.
    pub t3: f64,
    /// Irreducible label noise `sigma_m^2`.
    pub noise: f64,
    pub total: f64,
    /// The hypothesized signal-to-noise ratio the bound was evaluated at.
    pub r_required: f64,
    pub constants: MomentConstants,
    pub applicable: bool,
}

/// Expectation bound on the main-task error of the width-`q` network under
/// the signal-to-noise hypothesis `r`.
///
/// `r` is a caller-supplied hypothesis value: the underlying statement
/// quantifies over every draw, which no finite simulation can certify.
/// [`crate::montecarlo::lambda_sweep`] reports realized ratios alongside.
pub fn gen_bound(
    ens: &TaskEnsemble,
    w: &WeightConfig,
    q: usize,
    n: usize,
    r: f64,
    constants: Option<MomentConstants>,
) -> Result<GenBoundReport> {
    if w.num_aux() != ens.num_aux() {
        return Err(Error::InvalidInput(
            "gen_bound: mismatched task counts".into(),
        ));
    }
    let k = ens.num_aux();
    if q < 1 || q > k + 1 {
        return Err(Error::InvalidInput(format!(
            "gen_bound: q = {q} outside 1..={}",
            k + 1
        )));
    }
    let d = ens.dim();
    let constants = constants.unwrap_or_else(|| default_constants(d, q));
    let sigma_m = ens.main_sigma();
    let applicable = r > 1.0 && n > d + 3;
    if !applicable {
        return Ok(GenBoundReport {
            t1: f64::NAN,
            t2: f64::NAN,
            t3: f64::NAN,
            noise: sigma_m * sigma_m,
            total: f64::NAN,
            r_required: r,
            constants,
            applicable,
        });
    }

    let spec_x = crate::mat::spectrum(ens.sigma_x())?;
    let kappa = spec_x.max() / spec_x.min();
    let sigma_min = spec_x.min();

    let weighted = ens.true_w() * w.weight_matrix();
    let trunc_sigma = crate::mat::spectrum(&weighted)?.sigma(q + 1);

    let sqrt_n = (n as f64).sqrt();
    let sqrt_d = (d as f64).sqrt();
    let wide = (sqrt_n + sqrt_d) / (sqrt_n - (d as f64 + 3.0) / sqrt_n);
    let narrow = 1.0 / (sqrt_n - (d as f64 + 1.0) / sqrt_n);
    let w_m_norm = ens.main_w().norm();

    let t1 = 2.0 * constants.c4 * kappa * wide * wide * trunc_sigma * trunc_sigma;
    let rot = w_m_norm / (r - 1.0);
    let t2 = 6.0 * constants.c4 * kappa * wide * wide * rot * rot;
    let t3 = 6.0 * sigma_m * sigma_m * (constants.c3 / sigma_min)
        * narrow
        * narrow
        * (constants.c1 * d as f64 / ((r - 1.0) * (r - 1.0)) + constants.c2 * q as f64);
    let noise = sigma_m * sigma_m;
    Ok(GenBoundReport {
        t1,
        t2,
        t3,
        noise,
        total: t1 + t2 + t3 + noise,
        r_required: r,
        constants,
        applicable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::ols_all;
    use crate::rng::RngStream;
    use crate::taskgen::{make_ensemble, sample_dataset, CovarianceKind, EnsembleSpec};
    use approx::assert_abs_diff_eq;

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

    #[test]
    fn full_width_fit_reduces_to_per_task_ols() {
        let ens = make_ensemble(&spec(6, 2, 1.0, vec![1.0, 2.0, 3.0]), &RngStream::new(1, 0))
            .unwrap();
        let data = sample_dataset(&ens, 40, &RngStream::new(1, 1)).unwrap();
        let w = WeightConfig::new(vec![0.5, 2.0]).unwrap();
        let fit = reduced_rank_fit(&data, &w, 3).unwrap();
        let ols = ols_all(&data).unwrap();
        assert!((fit.w - ols).norm() < 1e-10);
        assert!(fit.dropped_tasks.is_empty());
    }

    #[test]
    fn noiseless_low_rank_truth_is_recovered() {
        // All tasks share one vector, so rank(W*) = 1 <= q.
        let ens = make_ensemble(&spec(5, 2, 0.0, vec![0.0, 0.0, 0.0]), &RngStream::new(2, 0))
            .unwrap();
        let data = sample_dataset(&ens, 30, &RngStream::new(2, 1)).unwrap();
        let w = WeightConfig::new(vec![1.0, 1.0]).unwrap();
        let fit = reduced_rank_fit(&data, &w, 1).unwrap();
        assert!((fit.w - ens.true_w()).norm() < 1e-8);
    }

    #[test]
    fn zero_weight_tasks_are_dropped_and_backfilled() {
        let ens = make_ensemble(&spec(5, 2, 1.0, vec![1.0, 1.0, 1.0]), &RngStream::new(3, 0))
            .unwrap();
        let data = sample_dataset(&ens, 30, &RngStream::new(3, 1)).unwrap();
        let w = WeightConfig::new(vec![0.0, 2.0]).unwrap();
        let fit = reduced_rank_fit(&data, &w, 1).unwrap();
        assert_eq!(fit.dropped_tasks, vec![0]);
        assert_eq!(fit.w.column(0).norm(), 0.0);
        assert!(fit.w.column(1).norm() > 0.0);
    }

    // The rank-q solution cannot lose to random rank-q candidates on the
    // weighted objective.
    #[test]
    fn truncated_fit_beats_random_rank_q_candidates() {
        let ens = make_ensemble(&spec(4, 2, 2.0, vec![1.0, 1.0, 1.0]), &RngStream::new(4, 0))
            .unwrap();
        let data = sample_dataset(&ens, 25, &RngStream::new(4, 1)).unwrap();
        let w = WeightConfig::new(vec![1.0, 3.0]).unwrap();
        let q = 2;
        let fit = reduced_rank_fit(&data, &w, q).unwrap();
        let weight = w.weight_matrix();
        let objective = |cand: &DMatrix<f64>| {
            ((data.x() * cand - data.y()) * &weight).norm_squared()
        };
        let ours = objective(&fit.w);
        let mut rng = RngStream::new(4, 2).rng();
        for _ in 0..300 {
            let left = crate::mat::standard_gaussian(4, q, &mut rng);
            let right = crate::mat::standard_gaussian(q, 3, &mut rng);
            assert!(ours <= objective(&(left * right)) + 1e-6);
        }
    }

    // Alternating-minimization oracle on the factored form W = B A: the
    // closed-form solution can never lose on the weighted objective.
    #[test]
    fn truncated_fit_beats_alternating_minimization() {
        let ens = make_ensemble(&spec(5, 2, 1.5, vec![1.0, 2.0, 1.5]), &RngStream::new(13, 0))
            .unwrap();
        let data = sample_dataset(&ens, 30, &RngStream::new(13, 1)).unwrap();
        let w = WeightConfig::new(vec![0.8, 2.5]).unwrap();
        let weight = w.weight_matrix();
        let objective =
            |cand: &DMatrix<f64>| ((data.x() * cand - data.y()) * &weight).norm_squared();
        let chol = Cholesky::new(data.x().transpose() * data.x()).unwrap();
        let y_weighted = data.y() * &weight;

        for q in 1..=2usize {
            let fit = reduced_rank_fit(&data, &w, q).unwrap();
            let ours = objective(&fit.w);

            let mut best = f64::INFINITY;
            let mut rng = RngStream::new(13, 2 + q as u64).rng();
            for _ in 0..5 {
                let mut b = crate::mat::standard_gaussian(5, q, &mut rng);
                let mut a = DMatrix::zeros(q, 3);
                for _ in 0..300 {
                    a = crate::mat::pinv(&(data.x() * &b)).unwrap() * data.y();
                    let c = &a * &weight;
                    let cct_inv = crate::mat::pinv(&(&c * c.transpose())).unwrap();
                    b = chol.solve(&(data.x().transpose() * &y_weighted * c.transpose()))
                        * cct_inv;
                }
                best = best.min(objective(&(&b * &a)));
            }
            assert!(
                ours <= best + 1e-6,
                "q = {q}: closed form {ours} vs alternating descent {best}"
            );
        }
    }

    #[test]
    fn snr_is_infinite_without_noise_and_halves_when_noise_doubles() {
        let ens = make_ensemble(&spec(5, 1, 1.0, vec![0.0, 0.0]), &RngStream::new(5, 0)).unwrap();
        let clean = sample_dataset(&ens, 30, &RngStream::new(5, 1)).unwrap();
        let w = WeightConfig::new(vec![1.0]).unwrap();
        assert!(realized_snr(&clean, &ens, &w, 1).unwrap().is_infinite());

        let noisy_ens =
            make_ensemble(&spec(5, 1, 1.0, vec![1.0, 2.0]), &RngStream::new(5, 0)).unwrap();
        let data = sample_dataset(&noisy_ens, 30, &RngStream::new(5, 2)).unwrap();
        let eps = data.y() - data.x() * noisy_ens.true_w();
        let doubled = crate::taskgen::Dataset::from_parts(
            data.x().clone(),
            data.x() * noisy_ens.true_w() + &eps * 2.0,
        )
        .unwrap();
        let r1 = realized_snr(&data, &noisy_ens, &w, 1).unwrap();
        let r2 = realized_snr(&doubled, &noisy_ens, &w, 1).unwrap();
        assert_abs_diff_eq!(r2, r1 / 2.0, epsilon = 1e-10 * r1);
    }

    // Direct recomputation oracle: form P_X explicitly and take raw SVDs.
    #[test]
    fn snr_matches_direct_recomputation() {
        let ens = make_ensemble(&spec(4, 1, 1.0, vec![1.0, 3.0]), &RngStream::new(6, 0)).unwrap();
        let data = sample_dataset(&ens, 20, &RngStream::new(6, 1)).unwrap();
        let w = WeightConfig::new(vec![0.7]).unwrap();
        let r = realized_snr(&data, &ens, &w, 1).unwrap();

        let weight = w.weight_matrix();
        let p_x = crate::mat::col_projector(data.x()).unwrap();
        let s = data.x() * ens.true_w() * &weight;
        let spec_s = crate::mat::spectrum(&s).unwrap();
        let z = p_x * (data.y() - data.x() * ens.true_w()) * &weight;
        let want = (spec_s.sigma(1) - spec_s.sigma(2)) / crate::mat::spectral_norm(&z);
        assert_abs_diff_eq!(r, want, epsilon = 1e-10 * want.abs());
    }

    #[test]
    fn column_bound_frozen_diagonal_example() {
        // S = diag(3,2,1), q = 1, Z = 0.1 e3 e3^T, first column: r = 10,
        // bound = 3/9, actual = 0.
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let mut z = DMatrix::zeros(3, 3);
        z[(2, 2)] = 0.1;
        let inst = PerturbationInstance::new(s, z, 1, 0).unwrap();
        let rep = column_bound_ours(&inst).unwrap();
        assert_abs_diff_eq!(rep.snr, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.ours.unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.actual, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.z_col, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_perturbation_gives_zero_bound() {
        let s = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        let z = DMatrix::zeros(4, 3);
        let inst = PerturbationInstance::new(s, z, 1, 2).unwrap();
        let rep = column_bound_ours(&inst).unwrap();
        assert_eq!(rep.ours, Some(0.0));
        assert_abs_diff_eq!(rep.actual, 0.0, epsilon = 1e-12);
        assert!(rep.snr.is_infinite());
    }

    #[test]
    fn small_snr_is_flagged_inapplicable() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0]));
        let z = DMatrix::from_fn(2, 2, |i, j| if i == j { 1.5 } else { 0.3 });
        let inst = PerturbationInstance::new(s, z, 1, 0).unwrap();
        let rep = column_bound_ours(&inst).unwrap();
        assert!(rep.snr <= 1.0);
        assert!(rep.ours.is_none());
    }

    #[test]
    fn competitor_bounds_frozen_example_and_guarantees() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let inst = PerturbationInstance::new(s.clone(), DMatrix::zeros(3, 3), 2, 0).unwrap();
        let rep = competitor_bounds(&inst).unwrap();
        assert_abs_diff_eq!(rep.eym, 2.0, epsilon = 1e-12);

        // Random perturbations: eym dominates the realized error always,
        // and the tvv coefficient exceeds ||Z|| whenever it applies.
        let mut rng = RngStream::new(7, 0).rng();
        for trial in 0..100 {
            let z = crate::mat::standard_gaussian(3, 3, &mut rng) * (0.01 + trial as f64 * 0.01);
            let inst = PerturbationInstance::new(s.clone(), z, 2, trial % 3).unwrap();
            let rep = competitor_bounds(&inst).unwrap();
            assert!(rep.actual <= rep.eym + 1e-12);
            if let Some(tvv) = rep.tvv {
                let z_norm = crate::mat::spectral_norm(inst.z());
                assert!(tvv > z_norm);
            }
        }
    }

    #[test]
    fn dominance_on_random_instances() {
        let mut rng = RngStream::new(8, 0).rng();
        let mut applicable = 0;
        for _ in 0..150 {
            let s = crate::mat::standard_gaussian(6, 4, &mut rng) * 10.0;
            let z = crate::mat::standard_gaussian(6, 4, &mut rng) * 0.5;
            let inst = PerturbationInstance::new(s, z, 2, 1).unwrap();
            let rep = column_bound_ours(&inst).unwrap();
            if let Some(ours) = rep.ours {
                assert!(
                    rep.actual <= ours + 1e-10,
                    "violation: actual {} vs ours {ours}",
                    rep.actual
                );
                applicable += 1;
            }
        }
        assert!(applicable > 50);
    }

    #[test]
    fn constants_match_their_exact_evaluations() {
        let c = moment_constants(100, 80, 1).unwrap();
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert_abs_diff_eq!(c.c3, e2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c3, 7.38905609893065, epsilon = 1e-9);

        // C1 d for d = 80: (sqrt(80)+1)^2 + 2 sqrt(pi) (sqrt(80)+1) + 2.
        let root = 80.0f64.sqrt() + 1.0;
        let want = root * root + 2.0 * std::f64::consts::PI.sqrt() * root + 2.0;
        assert_abs_diff_eq!(c.c1 * 80.0, want, epsilon = 1e-9);
        assert_abs_diff_eq!(c.c1 * 80.0, 136.14006990265744, epsilon = 1e-9);

        // Gamma sum for the fourth moment: 3 G(1) + 3 G(1.5) + G(2).
        let gamma_sum = 3.0 + 3.0 * (std::f64::consts::PI.sqrt() / 2.0) + 1.0;
        assert_abs_diff_eq!(gamma_sum, 6.658680776358274, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c4, e2 * gamma_sum.sqrt(), epsilon = 1e-12);

        assert!(matches!(moment_constants(83, 80, 1), Err(Error::SampleSize { .. })));
    }

    #[test]
    fn pinv_bound_value() {
        // N = 100, d = 10: (e sqrt(100) / 89)^2.
        let b = pinv_moment_bound(100, 10).unwrap();
        let want = (std::f64::consts::E * 10.0 / 89.0).powi(2);
        assert_abs_diff_eq!(b, want, epsilon = 1e-12);
    }

    #[test]
    fn gen_bound_limit_and_monotonicity() {
        // Identical tasks with weight 1 make W* L rank one, so the
        // truncation term vanishes at q = 1.
        let ens = make_ensemble(&spec(10, 1, 0.0, vec![1.0, 10.0]), &RngStream::new(9, 0)).unwrap();
        let w = WeightConfig::new(vec![1.0]).unwrap();
        let n = 1000;
        let huge = gen_bound(&ens, &w, 1, n, 1e9, None).unwrap();
        let c = huge.constants;
        let sqrt_n = (n as f64).sqrt();
        let narrow = 1.0 / (sqrt_n - 11.0 / sqrt_n);
        let limit = 6.0 * 100.0 * c.c3 * narrow * narrow * c.c2 + 100.0;
        assert_abs_diff_eq!(huge.total, limit, epsilon = 1e-3 * limit);

        let mut last = f64::INFINITY;
        for r in [1.5, 2.0, 4.0, 10.0, 100.0] {
            let rep = gen_bound(&ens, &w, 1, n, r, None).unwrap();
            assert!(rep.applicable);
            assert_abs_diff_eq!(rep.total, rep.t1 + rep.t2 + rep.t3 + rep.noise);
            assert!(rep.total < last);
            last = rep.total;
        }
    }

    #[test]
    fn gen_bound_flags_failed_hypotheses() {
        let ens = make_ensemble(&spec(10, 1, 0.1, vec![1.0, 10.0]), &RngStream::new(10, 0))
            .unwrap();
        let w = WeightConfig::new(vec![1.0]).unwrap();
        let low_r = gen_bound(&ens, &w, 1, 1000, 0.5, None).unwrap();
        assert!(!low_r.applicable && low_r.total.is_nan());
        let small_n = gen_bound(&ens, &w, 1, 13, 10.0, None).unwrap();
        assert!(!small_n.applicable && small_n.total.is_nan());
    }

    #[test]
    fn constants_can_be_overridden() {
        let ens = make_ensemble(&spec(10, 1, 0.1, vec![1.0, 10.0]), &RngStream::new(11, 0))
            .unwrap();
        let w = WeightConfig::new(vec![2.0]).unwrap();
        let ones = MomentConstants {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            c4: 1.0,
            provenance: Provenance::Override,
        };
        let with_ones = gen_bound(&ens, &w, 1, 1000, 50.0, Some(ones)).unwrap();
        let with_defaults = gen_bound(&ens, &w, 1, 1000, 50.0, None).unwrap();
        assert!(with_ones.total < with_defaults.total);
        assert_eq!(with_ones.constants.provenance, Provenance::Override);
    }
}
