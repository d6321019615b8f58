use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Principal axes of a point cloud, truncated to a variance fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Array1<f64>,
    /// `(n_components, d)`, orthonormal rows.
    components: Array2<f64>,
    /// Sample variance along each retained axis.
    explained_variance: Array1<f64>,
    total_variance: f64,
    zero_variance: bool,
}

impl PcaModel {
    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn components(&self) -> ArrayView2<'_, f64> {
        self.components.view()
    }

    pub fn explained_variance(&self) -> ArrayView1<'_, f64> {
        self.explained_variance.view()
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Set when every input point was identical.
    pub fn is_zero_variance(&self) -> bool {
        self.zero_variance
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_fraction(&self) -> f64 {
        if self.zero_variance {
            1.0
        } else {
            self.explained_variance.sum() / self.total_variance
        }
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "PCA expects {}-dim input, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(self.components.dot(&(&x - &self.mean)))
    }

    pub fn project_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "PCA expects {}-dim input, got {}",
                self.input_dim(),
                xs.ncols()
            )));
        }
        Ok((&xs - &self.mean).dot(&self.components.t()))
    }
}

/// Fits PCA and keeps the fewest leading axes whose cumulative variance
/// reaches `fraction` of the total.
pub fn fit_pca(points: ArrayView2<'_, f64>, fraction: f64) -> Result<PcaModel> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 points, got {n}")));
    }
    if d == 0 {
        return Err(Error::Dimension("PCA input has zero columns".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("variance fraction must lie in (0, 1], got {fraction}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("PCA input contains non-finite values".into()));
    }
    let mean = points.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]])));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variances: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = variances.iter().sum();

    let axis = |rank: usize| -> Array1<f64> {
        let col = eig.eigenvectors.column(order[rank]);
        let mut v = Array1::from_iter(col.iter().copied());
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        v
    };

    if total <= 0.0 {
        let mut first = Array2::zeros((1, d));
        first[[0, 0]] = 1.0;
        return Ok(PcaModel {
            mean,
            components: first,
            explained_variance: Array1::zeros(1),
            total_variance: 0.0,
            zero_variance: true,
        });
    }

    let mut kept = 0;
    let mut cumulative = 0.0;
    for v in &variances {
        kept += 1;
        cumulative += v;
        if cumulative / total >= fraction - 1e-12 {
            break;
        }
    }
    let rows: Vec<Array1<f64>> = (0..kept).map(axis).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(PcaModel {
        mean,
        components: ndarray::stack(Axis(0), &views).expect("equal-length axes"),
        explained_variance: Array1::from(variances[..kept].to_vec()),
        total_variance: total,
        zero_variance: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigenvalues of a symmetric matrix, sorted descending.
    fn jacobi_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn line_in_3d_is_rank_one() {
        let dir = array![1.0, 2.0, -2.0] / 3.0;
        let pts = Array2::from_shape_fn((6, 3), |(i, j)| 0.5 + i as f64 * dir[j]);
        let pca = fit_pca(pts.view(), 0.95).unwrap();
        assert_eq!(pca.n_components(), 1);
        let c = pca.components().row(0).to_owned();
        assert!((c.dot(&dir).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn isotropic_square_keeps_both_axes() {
        let pts = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let pca = fit_pca(pts.view(), 0.95).unwrap();
        assert_eq!(pca.n_components(), 2);
    }

    #[test]
    fn identical_points_flag_zero_variance() {
        let pts = Array2::from_elem((4, 3), 2.5);
        let pca = fit_pca(pts.view(), 0.95).unwrap();
        assert!(pca.is_zero_variance());
        assert_eq!(pca.n_components(), 1);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_pca(Array2::zeros((1, 3)).view(), 0.95).is_err());
    }

    #[test]
    fn random_cloud_against_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = Array2::from_shape_fn((20, 8), |(_, j)| rng.gen_range(-1.0..1.0) * (1.0 + j as f64));
            let pca = fit_pca(x.view(), 0.95).unwrap();
            let mean = x.mean_axis(Axis(0)).unwrap();
            let c = &x - &mean;
            let cov = c.t().dot(&c) / 19.0;
            let oracle = jacobi_eigenvalues(cov.clone());
            let total: f64 = oracle.iter().sum();
            assert!((pca.total_variance() - total).abs() < 1e-9 * total);
            // Minimal component count reaching the fraction.
            let mut cum = 0.0;
            let want = oracle.iter().position(|v| {
                cum += v;
                cum / total >= 0.95
            }).unwrap() + 1;
            assert_eq!(pca.n_components(), want);
            for (a, b) in pca.explained_variance().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9 * total);
            }
            // Reconstruction through the kept axes retains >= 95% of variance.
            let z = pca.project_rows(x.view()).unwrap();
            let recon = z.dot(&pca.components());
            let resid: f64 = (&c - &recon).iter().map(|v| v * v).sum::<f64>() / 19.0;
            assert!(1.0 - resid / total >= 0.95 - 1e-12);
            // Orthonormal rows, diagonal projected covariance.
            let g = pca.components().dot(&pca.components().t());
            let pc = z.t().dot(&z) / 19.0;
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let id = if i == j { 1.0 } else { 0.0 };
                    assert!((g[[i, j]] - id).abs() < 1e-8);
                    if i != j {
                        assert!(pc[[i, j]].abs() <= 1e-6 * pc[[i, i]].max(pc[[j, j]]));
                    }
                }
            }
        }
    }
}
