use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and covariance of a (possibly empirical) Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = Self { mean, cov };
        m.validate(1e-10)?;
        Ok(m)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric within `tol` and no eigenvalue below `-tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let d = self.dim();
        if self.cov.shape() != (d, d) {
            return Err(Error::Shape {
                op: "gaussian_moments",
                lhs: vec![d],
                rhs: vec![self.cov.nrows(), self.cov.ncols()],
            });
        }
        if (&self.cov - self.cov.transpose()).amax() > tol {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let min = SymmetricEigen::new(self.cov.clone()).eigenvalues.min();
        if d > 0 && min < -tol {
            return Err(Error::invalid(format!("covariance has eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Sample mean and unbiased covariance of the rows of `x` (`[N, D]`).
    pub fn from_samples(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.row_len());
        if n < 2 {
            return Err(Error::invalid("moments need at least two samples"));
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean().transpose();
        let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let mut cov = centred.transpose() * &centred / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }
}

pub(crate) fn tensor_to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.row_len(), t.data())
}

/// Posterior precision `Lambda_prior + sum_i A_i^T A_i / sigma^2`.
pub fn posterior_precision(loadings: &[&Tensor], sigma: f64, prior: &GaussianMoments) -> Result<DMatrix<f64>> {
    let prior_prec = prior
        .cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular prior covariance"))?;
    let mut prec = prior_prec;
    for a in loadings {
        let a = tensor_to_matrix(a);
        if a.ncols() != prior.dim() {
            return Err(Error::Shape {
                op: "posterior_precision",
                lhs: vec![a.nrows(), a.ncols()],
                rhs: vec![prior.dim()],
            });
        }
        prec += a.transpose() * &a / (sigma * sigma);
    }
    Ok(prec)
}

/// Exact posterior of `z` under `x_i = A_i z + sigma eps`, `z ~ prior`,
/// given the observed pairs `(A_i, x_i)`. No observations gives the prior.
pub fn analytic_gaussian_posterior(
    loadings: &[&Tensor],
    sigma: f64,
    observed: &[&[f64]],
    prior: &GaussianMoments,
) -> Result<GaussianMoments> {
    if loadings.len() != observed.len() {
        return Err(Error::invalid(format!(
            "{} loadings for {} observations",
            loadings.len(),
            observed.len()
        )));
    }
    if loadings.is_empty() {
        return Ok(prior.clone());
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("observation noise must be positive"));
    }
    let prec = posterior_precision(loadings, sigma, prior)?;
    let cov = prec
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular posterior precision"))?;
    let prior_prec = prior.cov.clone().try_inverse().expect("checked above");
    let mut eta = prior_prec * &prior.mean;
    for (a, x) in loadings.iter().zip(observed) {
        let a = tensor_to_matrix(a);
        if a.nrows() != x.len() {
            return Err(Error::Shape {
                op: "analytic_gaussian_posterior",
                lhs: vec![a.nrows(), a.ncols()],
                rhs: vec![x.len()],
            });
        }
        eta += a.transpose() * DVector::from_column_slice(x) / (sigma * sigma);
    }
    let mean = &cov * eta;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianMoments { mean, cov })
}

/// Moments of a 2-D density known up to a constant, by the trapezoid rule
/// on a `points x points` grid over `centre +- half_width`.
pub fn grid_moments_2d(
    log_density: impl Fn(f64, f64) -> f64,
    centre: [f64; 2],
    half_width: f64,
    points: usize,
) -> Result<GaussianMoments> {
    if points < 3 {
        return Err(Error::invalid("grid needs at least 3 points per axis"));
    }
    let h = 2.0 * half_width / (points - 1) as f64;
    let coord = |c: f64, k: usize| c - half_width + h * k as f64;
    let mut logs = vec![0.0; points * points];
    for i in 0..points {
        for j in 0..points {
            logs[i * points + j] = log_density(coord(centre[0], i), coord(centre[1], j));
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weight = |k: usize| if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
    let (mut z, mut m0, mut m1, mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..points {
        for j in 0..points {
            let p = weight(i) * weight(j) * (logs[i * points + j] - top).exp();
            let (a, b) = (coord(centre[0], i), coord(centre[1], j));
            z += p;
            m0 += p * a;
            m1 += p * b;
            s00 += p * a * a;
            s01 += p * a * b;
            s11 += p * b * b;
        }
    }
    let (m0, m1) = (m0 / z, m1 / z);
    let cov = DMatrix::from_row_slice(
        2,
        2,
        &[s00 / z - m0 * m0, s01 / z - m0 * m1, s01 / z - m0 * m1, s11 / z - m1 * m1],
    );
    Ok(GaussianMoments {
        mean: DVector::from_column_slice(&[m0, m1]),
        cov,
    })
}

/// Symmetric PSD square root with eigenvalues clamped at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_distance_gaussians(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op: "frechet_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    a.validate(1e-8)?;
    b.validate(1e-8)?;
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(&a.cov);
    let cross = sqrt_psd(&(&ra * &b.cov * &ra));
    let trace = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok((diff + trace).max(0.0))
}
