//! Isotropic Gaussian KDE with a Silverman-style bandwidth, used to pick the
//! most typical member of a point cloud.

use std::f64::consts::PI;

use ndarray::{ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::types::StdConvention;

use super::pca::fit_pca;

/// `h = mean_j(sigma_j) * E^(-1 / (d + 4))` over the projected columns.
///
/// Returns `0.0` when every point is identical.
pub fn silverman_bandwidth(projected: ArrayView2<'_, f64>, convention: StdConvention) -> Result<f64> {
    let (e, d) = projected.dim();
    if e < 2 {
        return Err(Error::InvalidInput(format!("bandwidth needs at least 2 points, got {e}")));
    }
    if d == 0 {
        return Err(Error::Dimension("bandwidth needs at least one dimension".into()));
    }
    let ddof = match convention {
        StdConvention::Sample => 1.0,
        StdConvention::Population => 0.0,
    };
    let mean_sigma = projected
        .axis_iter(Axis(1))
        .map(|col| col.std(ddof))
        .sum::<f64>()
        / d as f64;
    Ok(mean_sigma * (e as f64).powf(-1.0 / (d as f64 + 4.0)))
}

/// Log of the mean isotropic Gaussian kernel density at `query`.
pub fn kde_log_density(points: ArrayView2<'_, f64>, h: f64, query: ArrayView1<'_, f64>) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be > 0, got {h}")));
    }
    let (e, d) = points.dim();
    if e == 0 {
        return Err(Error::InvalidInput("KDE needs at least one point".into()));
    }
    if query.len() != d {
        return Err(Error::Dimension(format!("query has {} dims, points have {d}", query.len())));
    }
    let inv_two_h2 = 1.0 / (2.0 * h * h);
    let exponents: Vec<f64> = points
        .outer_iter()
        .map(|p| {
            let sq: f64 = p.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            -sq * inv_two_h2
        })
        .collect();
    let peak = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + exponents.iter().map(|x| (x - peak).exp()).sum::<f64>().ln();
    Ok(lse - (e as f64).ln() - 0.5 * d as f64 * (2.0 * PI * h * h).ln())
}

/// Index of the cloud member with the highest KDE log-density in PCA space.
///
/// Ties go to the lowest index; a degenerate cloud returns index 0.
pub fn select_template(
    slot_features: ArrayView2<'_, f64>,
    fraction: f64,
    convention: StdConvention,
) -> Result<usize> {
    let e = slot_features.nrows();
    if e == 0 {
        return Err(Error::InvalidInput("slot has no features".into()));
    }
    if e == 1 {
        return Ok(0);
    }
    let pca = fit_pca(slot_features, fraction)?;
    if pca.is_zero_variance() {
        return Ok(0);
    }
    let projected = pca.project_rows(slot_features)?;
    let h = silverman_bandwidth(projected.view(), convention)?;
    if h <= 0.0 {
        return Ok(0);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, q) in projected.outer_iter().enumerate() {
        let density = kde_log_density(projected.view(), h, q)?;
        if density > best.1 {
            best = (i, density);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_density(points: &Array2<f64>, h: f64, q: &Array1<f64>) -> f64 {
        let d = points.ncols() as f64;
        let norm = (2.0 * PI * h * h).powf(-d / 2.0);
        let mut acc = 0.0;
        for p in points.outer_iter() {
            let mut sq = 0.0;
            for j in 0..p.len() {
                sq += (p[j] - q[j]) * (p[j] - q[j]);
            }
            acc += norm * (-sq / (2.0 * h * h)).exp();
        }
        acc / points.nrows() as f64
    }

    #[test]
    fn silverman_one_dim_formula() {
        // Population std 2 exactly: half the points at -2, half at +2.
        let pts = Array2::from_shape_fn((100, 1), |(i, _)| if i % 2 == 0 { -2.0 } else { 2.0 });
        let h = silverman_bandwidth(pts.view(), StdConvention::Population).unwrap();
        assert!((h - 0.796_214_341_106_994_7).abs() < 1e-12, "{h}");
        assert!((h - 2.0 * 100f64.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn silverman_two_points_both_conventions() {
        let pts = array![[0.0, 0.0], [2.0, 0.0]];
        let sample = silverman_bandwidth(pts.view(), StdConvention::Sample).unwrap();
        let population = silverman_bandwidth(pts.view(), StdConvention::Population).unwrap();
        let shrink = 2f64.powf(-1.0 / 6.0);
        assert!((sample - 0.5 * 2f64.sqrt() * shrink).abs() < 1e-15);
        assert!((population - 0.5 * shrink).abs() < 1e-15);
    }

    #[test]
    fn silverman_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Array2::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let h = silverman_bandwidth(pts.view(), StdConvention::Sample).unwrap();
        let h3 = silverman_bandwidth((&pts * 3.5).view(), StdConvention::Sample).unwrap();
        assert!((h3 - 3.5 * h).abs() < 1e-12);
        assert_eq!(silverman_bandwidth(Array2::from_elem((5, 2), 1.0).view(), StdConvention::Sample).unwrap(), 0.0);
    }

    #[test]
    fn single_point_peak() {
        let h = 0.3;
        let pts = array![[1.0, -2.0, 0.5]];
        let got = kde_log_density(pts.view(), h, pts.row(0)).unwrap();
        let want = -1.5 * (2.0 * PI * h * h).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn density_decreases_with_distance() {
        let pts = array![[0.0, 0.0], [0.1, 0.0]];
        let mut last = f64::INFINITY;
        for k in 1..40 {
            let q = array![k as f64 * 0.5, 0.3];
            let v = kde_log_density(pts.view(), 0.2, q.view()).unwrap();
            assert!(v < last && v.is_finite());
            last = v;
        }
    }

    #[test]
    fn matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        for _ in 0..20 {
            let q = Array1::from_shape_fn(3, |_| rng.gen_range(-1.5..1.5));
            let got = kde_log_density(pts.view(), 0.4, q.view()).unwrap();
            assert!((got - naive_density(&pts, 0.4, &q).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_bandwidth() {
        let pts = array![[0.0]];
        assert!(kde_log_density(pts.view(), 0.0, pts.row(0)).is_err());
        assert!(kde_log_density(pts.view(), -1.0, pts.row(0)).is_err());
    }

    #[test]
    fn selection_cases() {
        assert_eq!(select_template(array![[4.0, 2.0]].view(), 0.95, StdConvention::Sample).unwrap(), 0);
        let line = array![[0.0], [0.1], [10.0]];
        let pick = select_template(line.view(), 0.95, StdConvention::Sample).unwrap();
        assert!(pick == 0 || pick == 1);
        let mut rows = Vec::new();
        for i in 0..2 {
            rows.push([-5.0 + 0.01 * i as f64, 1.0]);
        }
        for i in 0..5 {
            rows.push([5.0 + 0.01 * i as f64, 1.0]);
        }
        let clusters = Array2::from_shape_fn((7, 2), |(i, j)| rows[i][j]);
        assert!(select_template(clusters.view(), 0.95, StdConvention::Sample).unwrap() >= 2);
        assert_eq!(select_template(Array2::from_elem((4, 3), 0.5).view(), 0.95, StdConvention::Sample).unwrap(), 0);
    }
}
