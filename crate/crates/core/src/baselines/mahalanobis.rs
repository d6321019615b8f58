use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::checkpoint::{fit_pca, PcaModel};
use crate::error::{Error, Result};

/// Relative covariance floor: `floor = RIDGE * trace / d_pca`.
const RIDGE: f64 = 1e-6;

/// One Gaussian over PCA-projected calibration features.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pca: PcaModel,
    mean: Array1<f64>,
    /// Regularized covariance.
    covariance: Array2<f64>,
    /// Cholesky factor `L` of the covariance, `Σ = L Lᵀ`.
    cholesky: DMatrix<f64>,
    floor: f64,
}

impl GaussianModel {
    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn covariance(&self) -> ArrayView2<'_, f64> {
        self.covariance.view()
    }

    /// Diagonal regularization added to the sample covariance.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Mahalanobis distance of an already projected point.
    pub fn score_projected(&self, p: ArrayView1<'_, f64>) -> Result<f64> {
        if p.len() != self.mean.len() {
            return Err(Error::Dimension(format!("projected point has {} dims, model {}", p.len(), self.mean.len())));
        }
        let diff = DVector::from_iterator(p.len(), p.iter().zip(&self.mean).map(|(a, m)| a - m));
        let z = self
            .cholesky
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::InvalidInput("singular covariance factor".into()))?;
        Ok(z.norm())
    }

    pub fn score(&self, f: ArrayView1<'_, f64>) -> Result<f64> {
        self.score_projected(self.pca.project(f)?.view())
    }
}

/// Fits PCA (keeping `variance_fraction`) and then a regularized Gaussian in
/// the projected space. Needs more samples than retained components.
pub fn fit_mahalanobis(features: ArrayView2<'_, f64>, variance_fraction: f64) -> Result<GaussianModel> {
    let pca = fit_pca(features, variance_fraction)?;
    let projected = pca.project_rows(features)?;
    let (n, d) = projected.dim();
    if n < d + 1 {
        return Err(Error::InvalidInput(format!("{n} samples cannot fit a {d}-dimensional Gaussian; need at least {}", d + 1)));
    }
    let mean = projected.mean_axis(Axis(0)).expect("n > 0");
    let centered = &projected - &mean;
    let mut covariance = centered.t().dot(&centered) / (n - 1) as f64;
    let trace: f64 = covariance.diag().sum();
    // A zero-variance cloud still needs an invertible covariance.
    let floor = if trace > 0.0 { RIDGE * trace / d as f64 } else { RIDGE };
    for i in 0..d {
        covariance[[i, i]] += floor;
    }
    let sigma = DMatrix::from_fn(d, d, |i, j| covariance[[i, j]]);
    let cholesky = sigma
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?
        .l();
    Ok(GaussianModel { pca, mean, covariance, cholesky, floor })
}

pub fn score_mahalanobis(model: &GaussianModel, f: ArrayView1<'_, f64>) -> Result<f64> {
    model.score(f)
}
