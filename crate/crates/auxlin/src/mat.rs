//! Dense matrix kernels shared by every other module: SVD-based rank
//! truncation, pseudoinverse, projectors, spectra, simplex projection and
//! covariance-shaped Gaussian sampling.
//!
//! All linear algebra is dense `f64`; default comparison tolerance is 1e-8
//! absolute unless an operation states otherwise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Eigenvalues of a covariance matrix below this are rejected as non-PSD;
/// values in `[-PSD_TOL, 0]` are clamped to zero.
pub const PSD_TOL: f64 = 1e-10;

/// Singular values in descending order, length `min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `sigma_i` with 1-based `i`; zero beyond `min(rows, cols)`.
    pub fn sigma(&self, i: usize) -> f64 {
        assert!(i >= 1, "singular value index is 1-based");
        self.values.get(i - 1).copied().unwrap_or(0.0)
    }

    /// Spectral gap `sigma_q - sigma_{q+1}` (1-based `q`).
    pub fn gap(&self, q: usize) -> f64 {
        self.sigma(q) - self.sigma(q + 1)
    }

    /// Largest singular value, 0 for an all-zero matrix.
    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Smallest singular value of the full spectrum.
    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

fn ensure_nonempty_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidInput(format!("{what}: empty matrix")));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what}: matrix has non-finite entries"
        )));
    }
    Ok(())
}

/// SVD with singular values (and the matching columns of U / rows of Vᵀ)
/// sorted in descending order.
fn ordered_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    debug_assert!(sigma.windows(2).all(|w| w[0] >= w[1]));
    (u, sigma, v_t)
}

/// Relative rank cutoff: singular values at or below this count as zero.
fn rank_tol(a: &DMatrix<f64>, sigma_max: f64) -> f64 {
    f64::EPSILON * a.nrows().max(a.ncols()) as f64 * sigma_max.max(f64::MIN_POSITIVE)
}

/// All singular values of `a`, descending.
pub fn spectrum(a: &DMatrix<f64>) -> Result<Spectrum> {
    ensure_nonempty_finite(a, "spectrum")?;
    let values = a.clone().svd(false, false);
    Ok(Spectrum::new(values.singular_values.iter().copied().collect()))
}

/// Spectral norm `sigma_1(a)`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |m, &s| m.max(s))
}

/// Best rank-`q` approximation `[a]_q = sum_{i<=q} sigma_i u_i v_i^T`.
///
/// The spectral norm of the residual equals `sigma_{q+1}(a)`. When
/// `sigma_q = sigma_{q+1}` the SVD-routine ordering decides which subspace
/// survives; any choice is optimal, and [`top_projector`] exposes the
/// degenerate-gap flag for callers whose downstream bounds need a positive
/// gap.
pub fn truncate_rank(a: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    ensure_nonempty_finite(a, "truncate_rank")?;
    let p = a.nrows().min(a.ncols());
    if q < 1 || q > p {
        return Err(Error::RankOutOfRange {
            q,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let (u, sigma, v_t) = ordered_svd(a);
    let u_q = u.columns(0, q);
    let vt_q = v_t.rows(0, q);
    let scaled = DMatrix::from_fn(q, v_t.ncols(), |i, j| sigma[i] * vt_q[(i, j)]);
    Ok(u_q * scaled)
}

/// Moore-Penrose pseudoinverse.
pub fn pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_nonempty_finite(a, "pinv")?;
    let svd = a.clone().svd(true, true);
    let tol = rank_tol(a, svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s)));
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::InvalidInput(format!("pinv: {e}")))
}

/// Orthogonal projector onto the column space of a full-column-rank `x`:
/// `P_x = x (x^T x)^{-1} x^T`. Symmetric, idempotent, `P_x x = x`.
pub fn col_projector(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_nonempty_finite(x, "col_projector")?;
    let (n, d) = (x.nrows(), x.ncols());
    if d > n {
        return Err(Error::Singular(format!(
            "col_projector: {n}x{d} matrix cannot have full column rank"
        )));
    }
    let (u, sigma, _) = ordered_svd(x);
    let tol = rank_tol(x, sigma[0]);
    if sigma[d - 1] <= tol {
        return Err(Error::Singular(format!(
            "col_projector: rank-deficient input (sigma_min = {:.3e})",
            sigma[d - 1]
        )));
    }
    let u_d = u.columns(0, d);
    Ok(u_d * u_d.transpose())
}

/// Projector onto the span of the top-`q` left singular vectors, with a
/// warning flag when the defining spectral gap is numerically zero.
#[derive(Debug, Clone)]
pub struct TopProjector {
    /// `P_U = U_{:,q} U_{:,q}^T`; symmetric, idempotent, rank `q`.
    pub matrix: DMatrix<f64>,
    /// True when `sigma_q ~= sigma_{q+1}`, i.e. the subspace is not unique.
    pub degenerate_gap: bool,
}

/// Projector onto the top-`q` left singular subspace of `a`.
pub fn top_projector(a: &DMatrix<f64>, q: usize) -> Result<TopProjector> {
    ensure_nonempty_finite(a, "top_projector")?;
    let p = a.nrows().min(a.ncols());
    if q < 1 || q > p {
        return Err(Error::RankOutOfRange {
            q,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let (u, sigma, _) = ordered_svd(a);
    let next = if q < p { sigma[q] } else { 0.0 };
    let degenerate_gap = sigma[q - 1] - next <= 1e-12 * sigma[0].max(1.0);
    let u_q = u.columns(0, q);
    Ok(TopProjector {
        matrix: u_q * u_q.transpose(),
        degenerate_gap,
    })
}

/// Euclidean projection onto the probability simplex (entries >= 0, sum 1)
/// by sort-and-threshold. Already-feasible inputs come back unchanged.
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("simplex_project: empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "simplex_project: non-finite entries".into(),
        ));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.iter().map(|&x| (x - theta).max(0.0)).collect())
}

/// Symmetric PSD square root via eigen-decomposition.
///
/// Eigenvalues below `-PSD_TOL` are rejected; values in `[-PSD_TOL, 0]` are
/// clamped to zero.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_nonempty_finite(cov, "psd_sqrt")?;
    if cov.nrows() != cov.ncols() {
        return Err(Error::InvalidInput(format!(
            "psd_sqrt: covariance must be square, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let scale = cov.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1.0);
    let asym = (cov - cov.transpose()).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if asym > 1e-10 * scale {
        return Err(Error::InvalidInput(format!(
            "psd_sqrt: covariance is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let mut roots = DVector::zeros(cov.nrows());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -PSD_TOL {
            return Err(Error::NotPsd(lambda));
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * roots[j]);
    Ok(scaled * q.transpose())
}

/// A `rows x cols` matrix of i.i.d. standard normal draws consumed from
/// `rng` in column-major order.
pub fn standard_gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_vec(rows, cols, data)
}

/// `rows` i.i.d. mean-zero Gaussian rows with covariance `cov`, generated
/// as `G cov^{1/2}` with `G` standard Gaussian.
pub fn sample_gaussian(rows: usize, cov: &DMatrix<f64>, stream: &RngStream) -> Result<DMatrix<f64>> {
    if rows == 0 {
        return Err(Error::InvalidInput("sample_gaussian: rows must be >= 1".into()));
    }
    let sqrt = psd_sqrt(cov)?;
    let mut rng = stream.rng();
    Ok(standard_gaussian(rows, cov.nrows(), &mut rng) * sqrt)
}
