//! Ground-truth task ensembles and synthetic dataset sampling.
//!
//! An ensemble holds the population: a feature covariance with unit spectral
//! norm, one true weight vector per task (auxiliary columns first, main task
//! last) and per-task label noise levels. Datasets are drawn as
//! `X = G cov^{1/2}` with Gaussian `G`, labels `Y_t = X w_t + eps_t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat;
use crate::rng::RngStream;

/// Feature covariance selector for ensemble construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovarianceKind {
    Identity,
    /// Explicit matrix given by rows; normalized to unit spectral norm on
    /// construction when necessary.
    Explicit { rows: Vec<Vec<f64>> },
}

/// Recipe for a synthetic ensemble: the main-task vector is an amplified
/// standard Gaussian draw and each auxiliary vector adds isotropic noise of
/// scale `tilde_sigmas[k]` to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Default training sample count.
    pub n: usize,
    /// Feature dimension.
    pub d: usize,
    /// Number of auxiliary tasks.
    pub k: usize,
    /// Amplification of the main-task vector (`w_m = main_scale * z`).
    pub main_scale: f64,
    /// Model-similarity noise scales, one per auxiliary task.
    pub tilde_sigmas: Vec<f64>,
    /// Label noise levels, auxiliary tasks first, main task last.
    pub noise_sigmas: Vec<f64>,
    #[serde(default = "CovarianceKind::identity")]
    pub covariance: CovarianceKind,
}

impl CovarianceKind {
    fn identity() -> Self {
        CovarianceKind::Identity
    }
}

impl EnsembleSpec {
    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidInput("ensemble spec: d must be >= 1".into()));
        }
        if self.tilde_sigmas.len() != self.k {
            return Err(Error::InvalidInput(format!(
                "ensemble spec: expected {} tilde_sigmas, got {}",
                self.k,
                self.tilde_sigmas.len()
            )));
        }
        if self.noise_sigmas.len() != self.k + 1 {
            return Err(Error::InvalidInput(format!(
                "ensemble spec: expected {} noise_sigmas (auxiliary tasks then main), got {}",
                self.k + 1,
                self.noise_sigmas.len()
            )));
        }
        let scales = self
            .tilde_sigmas
            .iter()
            .chain(self.noise_sigmas.iter())
            .chain(std::iter::once(&self.main_scale));
        for &s in scales {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "ensemble spec: scales must be finite and >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Population ground truth: feature covariance, true task vectors and label
/// noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEnsemble {
    sigma_x: DMatrix<f64>,
    sigma_x_sqrt: DMatrix<f64>,
    /// `d x (K+1)`, auxiliary columns first, main task last.
    true_w: DMatrix<f64>,
    /// Length `K+1`, auxiliary tasks first, main task last.
    noise_sigmas: Vec<f64>,
    /// True when an explicit covariance had to be rescaled to unit spectral
    /// norm on construction.
    normalized: bool,
}

impl TaskEnsemble {
    /// Build a population ensemble. The covariance must be symmetric
    /// positive definite; it is rescaled to unit spectral norm when it does
    /// not already have it (the `was_normalized` flag records this).
    pub fn new(
        sigma_x: DMatrix<f64>,
        true_w: DMatrix<f64>,
        noise_sigmas: Vec<f64>,
    ) -> Result<Self> {
        Self::build(sigma_x, true_w, noise_sigmas, true)
    }

    /// Build an ensemble from data-derived estimates without rescaling the
    /// covariance: plug-in estimates converge to a unit-norm covariance but
    /// do not satisfy the invariant exactly at finite sample size.
    pub fn from_estimates(
        sigma_x: DMatrix<f64>,
        true_w: DMatrix<f64>,
        noise_sigmas: Vec<f64>,
    ) -> Result<Self> {
        Self::build(sigma_x, true_w, noise_sigmas, false)
    }

    fn build(
        sigma_x: DMatrix<f64>,
        true_w: DMatrix<f64>,
        noise_sigmas: Vec<f64>,
        normalize: bool,
    ) -> Result<Self> {
        let d = true_w.nrows();
        if d == 0 || true_w.ncols() == 0 {
            return Err(Error::InvalidInput("ensemble: empty task matrix".into()));
        }
        if sigma_x.nrows() != d || sigma_x.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "ensemble: covariance is {}x{} but tasks have dimension {d}",
                sigma_x.nrows(),
                sigma_x.ncols()
            )));
        }
        if noise_sigmas.len() != true_w.ncols() {
            return Err(Error::InvalidInput(format!(
                "ensemble: {} noise sigmas for {} tasks",
                noise_sigmas.len(),
                true_w.ncols()
            )));
        }
        if noise_sigmas.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(Error::InvalidInput(
                "ensemble: noise sigmas must be finite and >= 0".into(),
            ));
        }
        if true_w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("ensemble: non-finite task vector".into()));
        }

        let spec = mat::spectrum(&sigma_x)?;
        let norm = spec.max();
        if spec.min() <= 0.0 || norm <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "ensemble: covariance must be positive definite (sigma_min = {:.3e})",
                spec.min()
            )));
        }
        let mut normalized = false;
        let sigma_x = if normalize && (norm - 1.0).abs() > 1e-12 {
            normalized = true;
            sigma_x / norm
        } else {
            sigma_x
        };
        let sigma_x_sqrt = mat::psd_sqrt(&sigma_x)?;
        Ok(Self {
            sigma_x,
            sigma_x_sqrt,
            true_w,
            noise_sigmas,
            normalized,
        })
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.true_w.nrows()
    }

    /// Number of auxiliary tasks `K`.
    pub fn num_aux(&self) -> usize {
        self.true_w.ncols() - 1
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    pub fn sigma_x_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma_x_sqrt
    }

    /// `d x (K+1)` true task matrix, auxiliary columns first, main last.
    pub fn true_w(&self) -> &DMatrix<f64> {
        &self.true_w
    }

    /// True main-task vector (last column).
    pub fn main_w(&self) -> nalgebra::DVectorView<'_, f64> {
        self.true_w.column(self.true_w.ncols() - 1)
    }

    /// Label noise levels, auxiliary first, main last.
    pub fn noise_sigmas(&self) -> &[f64] {
        &self.noise_sigmas
    }

    /// Main-task label noise level.
    pub fn main_sigma(&self) -> f64 {
        self.noise_sigmas[self.noise_sigmas.len() - 1]
    }

    /// Whether an explicit covariance was rescaled on construction.
    pub fn was_normalized(&self) -> bool {
        self.normalized
    }

    /// JSON metadata (matrices stored column-major: one list per task
    /// vector / covariance column).
    pub fn to_json(&self) -> serde_json::Value {
        let cols = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.column_iter().map(|c| c.iter().copied().collect()).collect()
        };
        serde_json::json!({
            "d": self.dim(),
            "k": self.num_aux(),
            "noise_sigmas": self.noise_sigmas,
            "sigma_x_columns": cols(&self.sigma_x),
            "true_w_columns": cols(&self.true_w),
            "covariance_was_normalized": self.normalized,
        })
    }
}

/// Draw a ground-truth ensemble: `w_m = main_scale * z` with standard
/// Gaussian `z`, and `w_k = w_m + e_k` with `e_k ~ N(0, tilde_sigma_k^2 I)`.
pub fn make_ensemble(spec: &EnsembleSpec, stream: &RngStream) -> Result<TaskEnsemble> {
    spec.validate()?;
    let mut rng = stream.rng();
    let d = spec.d;
    let w_main = mat::standard_gaussian(d, 1, &mut rng) * spec.main_scale;
    let mut true_w = DMatrix::zeros(d, spec.k + 1);
    for k in 0..spec.k {
        let noise = mat::standard_gaussian(d, 1, &mut rng) * spec.tilde_sigmas[k];
        true_w.set_column(k, &(&w_main + noise).column(0));
    }
    true_w.set_column(spec.k, &w_main.column(0));

    let sigma_x = match &spec.covariance {
        CovarianceKind::Identity => DMatrix::identity(d, d),
        CovarianceKind::Explicit { rows } => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidInput(format!(
                    "ensemble spec: explicit covariance must be {d}x{d}"
                )));
            }
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        }
    };
    TaskEnsemble::new(sigma_x, true_w, spec.noise_sigmas.clone())
}

/// One realized training draw: shared features plus per-task labels
/// (auxiliary columns first, main task last).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    /// Wrap existing matrices, enforcing `N > d + 1` and full column rank.
    pub fn from_parts(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let (n, d) = (x.nrows(), x.ncols());
        if y.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "dataset: X has {n} rows but Y has {}",
                y.nrows()
            )));
        }
        if y.ncols() == 0 || d == 0 {
            return Err(Error::InvalidInput("dataset: empty matrices".into()));
        }
        if n <= d + 1 {
            return Err(Error::SampleSize { n, d, min: d + 1 });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset: non-finite entries".into()));
        }
        // Full column rank holds almost surely for Gaussian draws; verify.
        let xtx = x.transpose() * &x;
        if nalgebra::Cholesky::new(xtx).is_none() {
            return Err(Error::Singular(
                "dataset: X^T X is not positive definite (X is rank-deficient)".into(),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Number of auxiliary tasks (label columns minus the main task).
    pub fn num_aux(&self) -> usize {
        self.y.ncols() - 1
    }

    /// Main-task labels (last column).
    pub fn y_main(&self) -> nalgebra::DVectorView<'_, f64> {
        self.y.column(self.y.ncols() - 1)
    }

    /// Write `X.csv` and `Y.csv` (one sample per row) plus `meta.json` into
    /// `dir`, the layout the `auxlin weights` command ingests.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix_csv(&dir.join("X.csv"), &self.x)?;
        write_matrix_csv(&dir.join("Y.csv"), &self.y)?;
        let meta = serde_json::json!({
            "n": self.n(),
            "d": self.dim(),
            "k": self.num_aux(),
        });
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Read a dataset from a directory containing `X.csv` and `Y.csv`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let x = read_matrix_csv(&dir.join("X.csv"))?;
        let y = read_matrix_csv(&dir.join("Y.csv"))?;
        Self::from_parts(x, y)
    }
}

/// Shared generative path for training and test draws: features first, then
/// per-task noise in column order, all from one stream.
fn draw(ens: &TaskEnsemble, n: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = ens.dim();
    let x = mat::standard_gaussian(n, d, rng) * &ens.sigma_x_sqrt;
    let mut y = &x * &ens.true_w;
    for (t, &sigma) in ens.noise_sigmas.iter().enumerate() {
        let eps = mat::standard_gaussian(n, 1, rng) * sigma;
        let mut col = y.column_mut(t);
        col += eps.column(0);
    }
    (x, y)
}

/// Sample a training set of `n > d + 1` points.
pub fn sample_dataset(ens: &TaskEnsemble, n: usize, stream: &RngStream) -> Result<Dataset> {
    let d = ens.dim();
    if n <= d + 1 {
        return Err(Error::SampleSize { n, d, min: d + 1 });
    }
    let mut rng = stream.rng();
    let (x, y) = draw(ens, n, &mut rng);
    Ok(Dataset { x, y })
}

/// Sample fresh evaluation points through the same generative path as
/// training draws (no minimum-size requirement).
pub fn sample_points(
    ens: &TaskEnsemble,
    n: usize,
    stream: &RngStream,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("sample_points: n must be >= 1".into()));
    }
    let mut rng = stream.rng();
    Ok(draw(ens, n, &mut rng))
}

/// Write a matrix as plain numeric CSV, one matrix row per line, 17
/// significant digits.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&crate::experiment::fmt_f64(m[(i, j)]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a plain numeric CSV matrix. A first line whose cells all fail
/// numeric parsing is treated as a declared header row and skipped; any
/// other non-numeric cell is an error naming its row and column (1-based).
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let mut pending: Option<(usize, &str)> = lines.next();
    if let Some((_, first)) = pending {
        let all_non_numeric = first.split(',').all(|c| c.trim().parse::<f64>().is_err());
        if all_non_numeric {
            pending = lines.next();
        }
    }
    while let Some((line_idx, line)) = pending {
        let mut row = Vec::new();
        for (col_idx, cell) in line.split(',').enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::CsvCell {
                        path: name,
                        row: line_idx + 1,
                        col: col_idx + 1,
                        cell: cell.trim().to_string(),
                    })
                }
            }
        }
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(Error::Config(format!(
                    "{name}: row {} has {} cells, expected {}",
                    line_idx + 1,
                    row.len(),
                    prev.len()
                )));
            }
        }
        rows.push(row);
        pending = lines.next();
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{name}: no numeric rows")));
    }
    let (n, d) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn appendix_spec() -> EnsembleSpec {
        EnsembleSpec {
            n: 100,
            d: 80,
            k: 1,
            main_scale: 5.0,
            tilde_sigmas: vec![5.0],
            noise_sigmas: vec![1.0, 10.0],
            covariance: CovarianceKind::Identity,
        }
    }

    #[test]
    fn zero_similarity_noise_duplicates_the_main_task() {
        let spec = EnsembleSpec {
            tilde_sigmas: vec![0.0],
            ..appendix_spec()
        };
        let ens = make_ensemble(&spec, &RngStream::new(3, 0)).unwrap();
        let diff = ens.true_w().column(0) - ens.true_w().column(1);
        assert_eq!(diff.norm(), 0.0);
    }

    #[test]
    fn reference_simulation_parameters_build() {
        let ens = make_ensemble(&appendix_spec(), &RngStream::new(11, 0)).unwrap();
        assert_eq!(ens.dim(), 80);
        assert_eq!(ens.num_aux(), 1);
        assert_eq!(ens.noise_sigmas(), &[1.0, 10.0]);
        assert_abs_diff_eq!(mat::spectral_norm(ens.sigma_x()), 1.0, epsilon = 1e-12);
    }

    // Oracle: ||w_m||^2 is scale^2 * chi-square(d), mean 25 * 80 = 2000,
    // variance 2 * 80 * 625, so the mean over 1000 draws has SE ~= 10.
    #[test]
    fn main_vector_norm_matches_chi_square_mean() {
        let spec = appendix_spec();
        let reps = 1000;
        let mean = (0..reps)
            .map(|i| {
                let ens = make_ensemble(&spec, &RngStream::new(2024, i)).unwrap();
                ens.main_w().norm_squared()
            })
            .sum::<f64>()
            / reps as f64;
        let se = (2.0 * 80.0 * 625.0f64).sqrt() / (reps as f64).sqrt();
        assert!(
            (mean - 2000.0).abs() <= 3.0 * se,
            "mean {mean} outside 2000 +/- {}",
            3.0 * se
        );
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
        let err = TaskEnsemble::new(cov, w, vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    }

    #[test]
    fn explicit_covariance_is_normalized_with_flag() {
        let spec = EnsembleSpec {
            d: 2,
            tilde_sigmas: vec![1.0],
            covariance: CovarianceKind::Explicit {
                rows: vec![vec![4.0, 0.0], vec![0.0, 2.0]],
            },
            ..appendix_spec()
        };
        let ens = make_ensemble(&spec, &RngStream::new(1, 0)).unwrap();
        assert!(ens.was_normalized());
        assert_abs_diff_eq!(ens.sigma_x()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ens.sigma_x()[(1, 1)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let spec = EnsembleSpec {
            d: 6,
            noise_sigmas: vec![0.0, 0.0],
            ..appendix_spec()
        };
        let ens = make_ensemble(&spec, &RngStream::new(5, 0)).unwrap();
        let ds = sample_dataset(&ens, 20, &RngStream::new(5, 1)).unwrap();
        let clean = ds.x() * ens.true_w();
        assert_eq!(ds.y(), &clean);
    }

    #[test]
    fn dataset_requires_enough_samples() {
        let ens = make_ensemble(&appendix_spec(), &RngStream::new(5, 0)).unwrap();
        let err = sample_dataset(&ens, 81, &RngStream::new(5, 1)).unwrap_err();
        assert!(matches!(err, Error::SampleSize { min: 81, .. }));
    }

    #[test]
    fn dataset_sampling_is_deterministic() {
        let ens = make_ensemble(&appendix_spec(), &RngStream::new(5, 0)).unwrap();
        let a = sample_dataset(&ens, 120, &RngStream::new(5, 1)).unwrap();
        let b = sample_dataset(&ens, 120, &RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    // Residual variance per column approaches sigma_t^2, and the main and
    // auxiliary noises are uncorrelated (|corr| <= 3/sqrt(n)).
    #[test]
    fn label_noise_has_the_right_scale_and_is_independent() {
        let spec = EnsembleSpec {
            d: 4,
            tilde_sigmas: vec![2.0],
            noise_sigmas: vec![3.0, 10.0],
            ..appendix_spec()
        };
        let ens = make_ensemble(&spec, &RngStream::new(6, 0)).unwrap();
        let n = 10_000;
        let ds = sample_dataset(&ens, n, &RngStream::new(6, 1)).unwrap();
        let resid = ds.y() - ds.x() * ens.true_w();
        for (t, &sigma) in ens.noise_sigmas().iter().enumerate() {
            let var = resid.column(t).norm_squared() / n as f64;
            let tol = 4.0 * sigma * sigma * (2.0 / n as f64).sqrt();
            assert!(
                (var - sigma * sigma).abs() <= tol,
                "column {t}: variance {var} vs {}",
                sigma * sigma
            );
        }
        let aux = resid.column(0);
        let main = resid.column(1);
        let corr = aux.dot(&main) / (aux.norm() * main.norm());
        assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn csv_round_trip_and_ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ens = make_ensemble(&appendix_spec(), &RngStream::new(7, 0)).unwrap();
        let ds = sample_dataset(&ens, 120, &RngStream::new(7, 1)).unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(&back, &ds);

        // Header rows are skipped; a malformed interior cell is located.
        let with_header = "a,b\n1.0,2.0\n3.0,oops\n";
        fs::write(dir.path().join("bad.csv"), with_header).unwrap();
        let err = read_matrix_csv(&dir.path().join("bad.csv")).unwrap_err();
        match err {
            Error::CsvCell { row, col, .. } => {
                assert_eq!((row, col), (3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
