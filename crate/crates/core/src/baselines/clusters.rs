use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{fit_pca, PcaModel};
use crate::error::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 64;
const MAX_ITERATIONS: usize = 300;
const SHIFT_TOLERANCE: f64 = 1e-6;

/// k-means centroids over PCA-projected calibration features.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    pca: PcaModel,
    centroids: Array2<f64>,
    iterations: usize,
}

impl CentroidModel {
    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    /// Lloyd iterations run before convergence or the cap.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Distance from an already projected point to its nearest centroid.
    pub fn score_projected(&self, p: ArrayView1<'_, f64>) -> Result<f64> {
        if p.len() != self.centroids.ncols() {
            return Err(Error::Dimension(format!(
                "projected point has {} dims, centroids {}",
                p.len(),
                self.centroids.ncols()
            )));
        }
        Ok(nearest(self.centroids.view(), p).1.sqrt())
    }

    pub fn score(&self, f: ArrayView1<'_, f64>) -> Result<f64> {
        self.score_projected(self.pca.project(f)?.view())
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row; the lowest index wins ties.
fn nearest(centroids: ArrayView2<'_, f64>, p: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(row, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: ArrayView2<'_, f64>, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < c {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a chosen centroid.
            Err(_) => rng.gen_range(0..n),
        };
        chosen.push(next);
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Seeded k-means++ then Lloyd iterations, stopping once no centroid moves
/// more than 1e-6 or after 300 iterations. Asking for more clusters than
/// points falls back to one cluster per point.
pub fn fit_clusters(features: ArrayView2<'_, f64>, clusters: usize, variance_fraction: f64, seed: u64) -> Result<CentroidModel> {
    if clusters == 0 {
        return Err(Error::InvalidInput("need at least one cluster".into()));
    }
    let pca = fit_pca(features, variance_fraction)?;
    let points = pca.project_rows(features)?;
    let n = points.nrows();
    let c = if clusters > n {
        log::warn!("{clusters} clusters requested for {n} points; using {n}");
        n
    } else {
        clusters
    };
    if c == n {
        return Ok(CentroidModel { pca, centroids: points, iterations: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points.view(), c, &mut rng);
    let dim = points.ncols();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((c, dim));
        let mut counts = vec![0usize; c];
        for p in points.outer_iter() {
            let (k, _) = nearest(centroids.view(), p);
            sums.row_mut(k).scaled_add(1.0, &p);
            counts[k] += 1;
        }
        let mut shift: f64 = 0.0;
        for (k, &count) in counts.iter().enumerate() {
            // An empty cluster keeps its previous centroid.
            if count == 0 {
                continue;
            }
            let updated = sums.row(k).mapv(|v| v / count as f64);
            shift = shift.max(sq_dist(updated.view(), centroids.row(k)).sqrt());
            centroids.row_mut(k).assign(&updated);
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    Ok(CentroidModel { pca, centroids, iterations })
}

pub fn score_clusters(model: &CentroidModel, f: ArrayView1<'_, f64>) -> Result<f64> {
    model.score(f)
}
