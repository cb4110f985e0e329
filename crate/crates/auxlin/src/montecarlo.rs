//! Deterministic replication harness: Monte Carlo estimates of expected
//! generalization errors, weight and signal-to-noise sweeps, and empirical
//! checks of the moment bounds and the inverse-covariance mean identity.
//!
//! Stream layout: an experiment owns one seed; sweep point `p`, replicate
//! `i` draws its training set from stream `(p << 32) + 2 i` and its test
//! points from `(p << 32) + 2 i + 1`. Replicates run in parallel but are
//! aggregated in index order, so results are identical at any thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_net::{self, MomentConstants};
use crate::mat;
use crate::regression::{self, WeightConfig};
use crate::rng::RngStream;
use crate::taskgen::{sample_dataset, sample_points, CovarianceKind, TaskEnsemble};

/// Which estimator a Monte Carlo run fits per replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fit", rename_all = "kebab-case")]
pub enum FitKind {
    /// Shared weighted least squares.
    Regression,
    /// Width-`q` reduced-rank network.
    ReducedRank { q: usize },
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    pub mean: f64,
    /// Sample standard deviation over replicates divided by sqrt(reps).
    pub std_error: f64,
    /// Replicates that completed.
    pub reps: usize,
    /// Replicates that failed (counted, never resampled).
    pub failed: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// One row of a sweep: the swept variables, an optional MC estimate and the
/// named closed-form / bound values for this point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Row label (used by moment checks as the check kind).
    pub label: Option<String>,
    /// Named sweep variables in column order.
    pub sweep: Vec<(String, f64)>,
    pub mc: Option<MCResult>,
    /// Named values in column order.
    pub metrics: Vec<(String, f64)>,
}

impl SweepRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find_map(|(k, v)| (k == name).then_some(*v))
    }

    pub fn sweep_value(&self, name: &str) -> Option<f64> {
        self.sweep
            .iter()
            .find_map(|(k, v)| (k == name).then_some(*v))
    }
}

/// Run replicates in parallel with per-replicate streams, preserving
/// replicate order. Failures are recorded; more than 1% of them aborts the
/// experiment.
fn run_replicates<T: Send>(
    reps: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be >= 1".into()));
    }
    let outcomes: Vec<Result<T>> = (0..reps).into_par_iter().map(&f).collect();
    let failed = outcomes.iter().filter(|r| r.is_err()).count();
    if failed as f64 > 0.01 * reps as f64 {
        let first = outcomes
            .iter()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_default();
        return Err(Error::ExperimentFailure {
            failed,
            total: reps,
            first,
        });
    }
    Ok(outcomes.into_iter().filter_map(|r| r.ok()).collect())
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Mean squared prediction error of `est` on fresh main-task points.
fn test_mse(
    ens: &TaskEnsemble,
    est: &nalgebra::DVector<f64>,
    n_test: usize,
    stream: &RngStream,
) -> Result<f64> {
    let (x, y) = sample_points(ens, n_test, stream)?;
    let resid = x * est - y.column(y.ncols() - 1);
    Ok(resid.norm_squared() / n_test as f64)
}

struct Replicate {
    mse: f64,
    snr: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    ens: &TaskEnsemble,
    w: &WeightConfig,
    fit: FitKind,
    n: usize,
    n_test: usize,
    seed: u64,
    block: u64,
    rep: usize,
) -> Result<Replicate> {
    let base = block << 32;
    let train = RngStream::new(seed, base + 2 * rep as u64);
    let test = RngStream::new(seed, base + 2 * rep as u64 + 1);
    let data = sample_dataset(ens, n, &train)?;
    match fit {
        FitKind::Regression => {
            let est = regression::shared_estimator(&data, w)?;
            Ok(Replicate {
                mse: test_mse(ens, &est, n_test, &test)?,
                snr: None,
            })
        }
        FitKind::ReducedRank { q } => {
            let est = linear_net::reduced_rank_fit(&data, w, q)?.main();
            let snr = linear_net::realized_snr(&data, ens, w, q)?;
            Ok(Replicate {
                mse: test_mse(ens, &est, n_test, &test)?,
                snr: Some(snr),
            })
        }
    }
}

struct SnrSummary {
    mean: f64,
    values: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn mc_error_block(
    ens: &TaskEnsemble,
    w: &WeightConfig,
    fit: FitKind,
    n: usize,
    reps: usize,
    n_test: usize,
    seed: u64,
    block: u64,
) -> Result<(MCResult, Option<SnrSummary>)> {
    let outcomes = run_replicates(reps, |rep| {
        run_one(ens, w, fit, n, n_test, seed, block, rep)
    })?;
    let mses: Vec<f64> = outcomes.iter().map(|o| o.mse).collect();
    let (mean, std_error) = mean_and_se(&mses);
    let snr = if outcomes.iter().all(|o| o.snr.is_some()) {
        let values: Vec<f64> = outcomes.iter().filter_map(|o| o.snr).collect();
        Some(SnrSummary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            values,
        })
    } else {
        None
    };
    Ok((
        MCResult {
            mean,
            std_error,
            reps: mses.len(),
            failed: reps - mses.len(),
            n_test,
            seed,
        },
        snr,
    ))
}

/// Monte Carlo estimate of the expected main-task generalization error:
/// per replicate, draw a fresh training set, fit, and average the squared
/// error on `n_test` fresh points.
pub fn mc_error(
    ens: &TaskEnsemble,
    w: &WeightConfig,
    fit: FitKind,
    n: usize,
    reps: usize,
    n_test: usize,
    seed: u64,
) -> Result<MCResult> {
    Ok(mc_error_block(ens, w, fit, n, reps, n_test, seed, 0)?.0)
}

/// Monte Carlo settings shared by the sweep operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub reps: usize,
    #[serde(default = "McSettings::default_n_test")]
    pub n_test: usize,
    pub seed: u64,
}

impl McSettings {
    fn default_n_test() -> usize {
        10_000
    }
}

fn weight_columns(w: &WeightConfig) -> Vec<(String, f64)> {
    w.lambdas()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let name = if i == 0 {
                "lambda".to_string()
            } else {
                format!("lambda{}", i + 1)
            };
            (name, l)
        })
        .collect()
}

/// Sweep a grid of weight configurations.
///
/// Regression rows carry the closed-form error, the baseline, the
/// beneficial-weight cap at the row's proportions and the optimal total
/// weight. Network rows carry the mean realized signal-to-noise ratio and
/// the generalization bound evaluated at it (NaN where its hypotheses
/// fail), with `constants` overriding the bound constants when given.
pub fn lambda_sweep(
    ens: &TaskEnsemble,
    fit: FitKind,
    grid: &[WeightConfig],
    n: usize,
    mc: &McSettings,
    constants: Option<MomentConstants>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("lambda_sweep: empty grid".into()));
    }
    let e0 = regression::baseline_error(ens, n)?.total;
    let opt = if ens.num_aux() >= 1 {
        Some(regression::optimal_weights(ens, n, &Default::default())?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(grid.len());
    for (p, w) in grid.iter().enumerate() {
        let (result, snr_mean) =
            mc_error_block(ens, w, fit, n, mc.reps, mc.n_test, mc.seed, p as u64)?;
        let mut metrics = Vec::new();
        match fit {
            FitKind::Regression => {
                let ek = regression::closed_form_error(ens, w, n)?.total;
                let cap = if w.total() > 0.0 {
                    regression::utility_condition(ens, w, n)?.lambda_cap
                } else {
                    f64::NAN
                };
                metrics.push(("ek_closed".into(), ek));
                metrics.push(("e0".into(), e0));
                metrics.push(("threshold_cap".into(), cap));
                metrics.push((
                    "lambda_star".into(),
                    opt.as_ref().map_or(f64::NAN, |o| o.total_star),
                ));
            }
            FitKind::ReducedRank { q } => {
                let (r, violation_rate) = match &snr_mean {
                    Some(s) => {
                        let below = s.values.iter().filter(|&&v| v < s.mean).count();
                        (s.mean, below as f64 / s.values.len() as f64)
                    }
                    None => (f64::NAN, f64::NAN),
                };
                let bound = linear_net::gen_bound(ens, w, q, n, r, constants)?;
                metrics.push(("r_realized_mean".into(), r));
                metrics.push(("u_ek".into(), bound.total));
                metrics.push(("t1".into(), bound.t1));
                metrics.push(("t2".into(), bound.t2));
                metrics.push(("t3".into(), bound.t3));
                metrics.push(("e0".into(), e0));
                // How often the realized ratio fell short of the value the
                // bound was evaluated at (the hypothesis holds per-draw).
                metrics.push(("r_violation_rate".into(), violation_rate));
            }
        }
        rows.push(SweepRow {
            label: None,
            sweep: weight_columns(w),
            mc: Some(result),
            metrics,
        });
    }
    Ok(rows)
}

/// Geometry of a controlled perturbation instance.
///
/// The signal is `U S V^T` with random orthonormal factors and a fixed
/// spectrum holding a unit gap after rank `q`; the row of `V` hit by the
/// probed column is shrunk by `col_scale` so the probed signal column stays
/// small. The Gaussian perturbation is rescaled so `gap / ||Z||` equals the
/// requested ratio exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbGeometry {
    pub rows: usize,
    pub cols: usize,
    pub q: usize,
    /// Probed column (0-based); defaults to the last column.
    pub col: Option<usize>,
    /// Shrink factor for the probed column of the signal.
    #[serde(default = "PerturbGeometry::default_col_scale")]
    pub col_scale: f64,
}

impl PerturbGeometry {
    fn default_col_scale() -> f64 {
        0.05
    }

    fn probed_col(&self) -> usize {
        self.col.unwrap_or(self.cols - 1)
    }

    fn validate(&self) -> Result<()> {
        let p = self.rows.min(self.cols);
        if self.q < 1 || self.q >= p {
            return Err(Error::InvalidInput(format!(
                "perturb geometry: q = {} outside 1..{p}",
                self.q
            )));
        }
        if self.probed_col() >= self.cols {
            return Err(Error::InvalidInput("perturb geometry: column out of range".into()));
        }
        if !(self.col_scale.is_finite() && self.col_scale >= 0.0) {
            return Err(Error::InvalidInput("perturb geometry: bad col_scale".into()));
        }
        Ok(())
    }
}

/// Build one instance with realized ratio exactly `r`.
pub fn make_instance(
    geom: &PerturbGeometry,
    r: f64,
    stream: &RngStream,
) -> Result<linear_net::PerturbationInstance> {
    geom.validate()?;
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidInput(format!("perturb: ratio {r} must be > 0")));
    }
    let (m, n, q) = (geom.rows, geom.cols, geom.q);
    let p = m.min(n);
    let mut rng = stream.rng();

    let left = mat::standard_gaussian(m, p, &mut rng).qr().q();
    let mut raw_right = mat::standard_gaussian(n, p, &mut rng);
    let j = geom.probed_col();
    raw_right.row_mut(j).scale_mut(geom.col_scale);
    let right = raw_right.qr().q();

    // Spectrum: values in [2, 3] up to rank q, then [0.2, 1]; unit gap.
    let mut sigma = Vec::with_capacity(p);
    for i in 0..q {
        let frac = if q > 1 { i as f64 / (q - 1) as f64 } else { 0.0 };
        sigma.push(3.0 - frac);
    }
    for i in q..p {
        let tail = p - q;
        let frac = (i - q) as f64 / tail as f64;
        sigma.push(1.0 - 0.8 * frac);
    }
    let mut scaled = right.transpose();
    for (i, &s) in sigma.iter().enumerate() {
        scaled.row_mut(i).scale_mut(s);
    }
    let signal = &left * scaled;

    let raw_z = mat::standard_gaussian(m, n, &mut rng);
    let z_norm = mat::spectral_norm(&raw_z);
    let gap = sigma[q - 1] - sigma[q];
    let z = raw_z * (gap / (r * z_norm));
    linear_net::PerturbationInstance::new(signal, z, q, j)
}

fn mean_of(values: &[Option<f64>]) -> f64 {
    if values.iter().any(|v| v.is_none()) {
        return f64::NAN;
    }
    values.iter().flatten().sum::<f64>() / values.len() as f64
}

/// Sweep the signal-to-noise ratio over controlled instances, averaging the
/// realized column error and every bound per grid point. Rows where a bound
/// hypothesis fails report NaN for that bound.
pub fn perturb_sweep(
    geom: &PerturbGeometry,
    r_grid: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if r_grid.is_empty() {
        return Err(Error::InvalidInput("perturb_sweep: empty grid".into()));
    }
    let mut rows = Vec::with_capacity(r_grid.len());
    for (p, &r) in r_grid.iter().enumerate() {
        let reports = run_replicates(reps, |rep| {
            let stream = RngStream::new(seed, ((p as u64) << 32) + rep as u64);
            let inst = make_instance(geom, r, &stream)?;
            linear_net::column_bound_ours(&inst)
        })?;
        let actual: Vec<f64> = reports.iter().map(|b| b.actual).collect();
        let z_col: Vec<f64> = reports.iter().map(|b| b.z_col).collect();
        let proj: Vec<f64> = reports.iter().map(|b| b.proj_z_col).collect();
        let eym: Vec<f64> = reports.iter().map(|b| b.eym).collect();
        let ours: Vec<Option<f64>> = reports.iter().map(|b| b.ours).collect();
        let tvv: Vec<Option<f64>> = reports.iter().map(|b| b.tvv).collect();
        rows.push(SweepRow {
            label: None,
            sweep: vec![("r".into(), r)],
            mc: None,
            metrics: vec![
                ("actual_mean".into(), mean_and_se(&actual).0),
                ("ours_mean".into(), mean_of(&ours)),
                ("eym_mean".into(), mean_and_se(&eym).0),
                ("tvv_mean".into(), mean_of(&tvv)),
                ("zcol_mean".into(), mean_and_se(&z_col).0),
                ("projzcol_mean".into(), mean_and_se(&proj).0),
            ],
        });
    }
    Ok(rows)
}

/// Empirical moment and identity checks against their analytic bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentCheck {
    /// `E||P_X eps||^2 / sigma^2` vs the `C_1 d` bound.
    ColNorm { n: usize, d: usize, sigma: f64 },
    /// `E||U_q^T z||^2 / sigma^2` vs the `C_2 q` bound for an independent
    /// random `q`-dimensional subspace of `R^m`.
    ProjNorm { m: usize, q: usize, sigma: f64 },
    /// `E||G^dagger||^2` vs `e^2 N / (N - d - 1)^2`.
    PinvNorm { n: usize, d: usize },
    /// Entrywise mean of `(X^T X)^{-1}` vs `Sigma_x^{-1} / (N - d - 1)`,
    /// reported as the worst deviation in standard-error units vs 3.
    WishartMean {
        n: usize,
        d: usize,
        #[serde(default = "MomentCheck::default_cov")]
        covariance: CovarianceKind,
    },
}

impl MomentCheck {
    fn default_cov() -> CovarianceKind {
        CovarianceKind::Identity
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            MomentCheck::ColNorm { .. } => "col_norm",
            MomentCheck::ProjNorm { .. } => "proj_norm",
            MomentCheck::PinvNorm { .. } => "pinv_norm",
            MomentCheck::WishartMean { .. } => "wishart_mean",
        }
    }
}

/// Run one empirical check; the row's `empirical`, `bound` and `ratio`
/// metrics satisfy the check when `ratio <= 1`.
pub fn moment_check(check: &MomentCheck, reps: usize, seed: u64) -> Result<SweepRow> {
    match check {
        MomentCheck::ColNorm { n, d, sigma } => {
            let (n, d, sigma) = (*n, *d, *sigma);
            if n <= d {
                return Err(Error::SampleSize { n, d, min: d });
            }
            let vals = run_replicates(reps, |rep| {
                let mut rng = RngStream::new(seed, rep as u64).rng();
                let x = mat::standard_gaussian(n, d, &mut rng);
                let eps = mat::standard_gaussian(n, 1, &mut rng) * sigma;
                let chol = nalgebra::Cholesky::new(x.transpose() * &x)
                    .ok_or_else(|| Error::Singular("X^T X".into()))?;
                let projected = &x * chol.solve(&(x.transpose() * &eps));
                Ok(projected.norm_squared() / (sigma * sigma))
            })?;
            let empirical = mean_and_se(&vals).0;
            let bound = linear_net::projected_noise_bound(d);
            Ok(check_row(check, &[("n", n as f64), ("d", d as f64)], empirical, bound, vec![]))
        }
        MomentCheck::ProjNorm { m, q, sigma } => {
            let (m, q, sigma) = (*m, *q, *sigma);
            if q == 0 || q > m {
                return Err(Error::InvalidInput("proj_norm: need 1 <= q <= m".into()));
            }
            let samples = run_replicates(reps, |rep| {
                let mut rng = RngStream::new(seed, rep as u64).rng();
                let basis = mat::standard_gaussian(m, q, &mut rng).qr().q();
                let z = mat::standard_gaussian(m, 1, &mut rng) * sigma;
                let projected = (basis.transpose() * &z).norm();
                Ok((projected, z.norm()))
            })?;
            let sq: Vec<f64> = samples
                .iter()
                .map(|(p, _)| p * p / (sigma * sigma))
                .collect();
            let empirical = mean_and_se(&sq).0;
            let bound = linear_net::projected_noise_bound(q);
            let mean_proj = samples.iter().map(|(p, _)| p).sum::<f64>() / reps as f64;
            let mean_full = samples.iter().map(|(_, z)| z).sum::<f64>() / reps as f64;
            let extras = vec![
                ("mean_proj_norm".to_string(), mean_proj),
                ("mean_col_norm".to_string(), mean_full),
                ("shrinkage_ratio".to_string(), mean_proj / mean_full),
                (
                    "shrinkage_bound".to_string(),
                    1.2 * (q as f64 / m as f64).sqrt(),
                ),
            ];
            Ok(check_row(check, &[("m", m as f64), ("q", q as f64)], empirical, bound, extras))
        }
        MomentCheck::PinvNorm { n, d } => {
            let (n, d) = (*n, *d);
            let bound = linear_net::pinv_moment_bound(n, d)?;
            let vals = run_replicates(reps, |rep| {
                let mut rng = RngStream::new(seed, rep as u64).rng();
                let g = mat::standard_gaussian(n, d, &mut rng);
                let smallest = mat::spectrum(&g)?.min();
                if smallest <= 0.0 {
                    return Err(Error::Singular("zero smallest singular value".into()));
                }
                Ok(1.0 / (smallest * smallest))
            })?;
            let empirical = mean_and_se(&vals).0;
            Ok(check_row(check, &[("n", n as f64), ("d", d as f64)], empirical, bound, vec![]))
        }
        MomentCheck::WishartMean { n, d, covariance } => {
            let (n, d) = (*n, *d);
            if n <= d + 1 {
                return Err(Error::SampleSize { n, d, min: d + 1 });
            }
            let cov = match covariance {
                CovarianceKind::Identity => DMatrix::identity(d, d),
                CovarianceKind::Explicit { rows } => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::InvalidInput("wishart_mean: covariance shape".into()));
                    }
                    DMatrix::from_fn(d, d, |i, j| rows[i][j])
                }
            };
            let sqrt = mat::psd_sqrt(&cov)?;
            let draws = run_replicates(reps, |rep| {
                let mut rng = RngStream::new(seed, rep as u64).rng();
                let x = mat::standard_gaussian(n, d, &mut rng) * &sqrt;
                (x.transpose() * &x)
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("X^T X not invertible".into()))
            })?;
            let reps_f = draws.len() as f64;
            let mut mean = DMatrix::zeros(d, d);
            for m in &draws {
                mean += m;
            }
            mean /= reps_f;
            let target = cov
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("covariance not invertible".into()))?
                / (n - d - 1) as f64;
            // Worst entrywise deviation in SE units.
            let mut worst = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    let var = draws
                        .iter()
                        .map(|m| {
                            let v = m[(i, j)] - mean[(i, j)];
                            v * v
                        })
                        .sum::<f64>()
                        / (reps_f - 1.0);
                    let se = var.sqrt() / reps_f.sqrt();
                    if se > 0.0 {
                        worst = worst.max((mean[(i, j)] - target[(i, j)]).abs() / se);
                    }
                }
            }
            Ok(check_row(check, &[("n", n as f64), ("d", d as f64)], worst, 3.0, vec![]))
        }
    }
}

fn check_row(
    check: &MomentCheck,
    params: &[(&str, f64)],
    empirical: f64,
    bound: f64,
    extras: Vec<(String, f64)>,
) -> SweepRow {
    let mut metrics = vec![
        ("empirical".to_string(), empirical),
        ("bound".to_string(), bound),
        ("ratio".to_string(), empirical / bound),
    ];
    metrics.extend(extras);
    SweepRow {
        label: Some(check.kind_name().to_string()),
        sweep: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        mc: None,
        metrics,
    }
}
