use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{ActionChunk, FeatureVector, TokenSequence};

use super::geometry::{Point, Polyline};

/// Number of appearance inputs the encoder sees next to the state.
pub const APPEARANCE_DIM: usize = 2;

/// Seeded stand-in for a frozen observation encoder: `tanh(W [state; app] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    weights: Array2<f64>,
    bias: Array1<f64>,
    /// Zero-mean token offsets, one row per token.
    offsets: Array2<f64>,
}

impl FeatureMap {
    pub fn new(seed: u64, dim: usize, scale: f64, bias_scale: f64, tokens: usize, spread: f64) -> Result<Self> {
        if dim == 0 || tokens == 0 {
            return Err(Error::Config("feature map needs positive dimension and token count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let inputs = 2 + APPEARANCE_DIM;
        let weights = Array2::from_shape_simple_fn((dim, inputs), || normal(scale));
        let bias = Array1::from_shape_simple_fn(dim, || normal(bias_scale));
        let mut offsets = Array2::from_shape_simple_fn((tokens, dim), || normal(spread));
        let mean = offsets.mean_axis(ndarray::Axis(0)).expect("tokens > 0");
        offsets -= &mean;
        Ok(Self { weights, bias, offsets })
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    fn input(state: Point, appearance: &[f64]) -> Array1<f64> {
        let mut v = Array1::zeros(2 + APPEARANCE_DIM);
        v[0] = state[0];
        v[1] = state[1];
        for (slot, a) in v.iter_mut().skip(2).zip(appearance) {
            *slot = *a;
        }
        v
    }

    pub fn features(&self, state: Point, appearance: &[f64]) -> FeatureVector {
        let z = self.weights.dot(&Self::input(state, appearance)) + &self.bias;
        FeatureVector::new(z.mapv(f64::tanh)).expect("finite by construction")
    }

    /// Pseudo-tokens whose mean is the feature vector.
    pub fn tokens(&self, state: Point, appearance: &[f64]) -> TokenSequence {
        let f = self.features(state, appearance);
        let tokens = &self.offsets + &f.view().insert_axis(ndarray::Axis(0));
        TokenSequence::new(tokens).expect("finite by construction")
    }
}

/// Scripted action-chunked policy that follows a polyline.
///
/// Actions encode absolute position targets as `L * (target - center)`, so
/// the map from state to chunk is `L`-Lipschitz along the path. Outside the
/// basin the policy loses the path and heads away from it along a heading
/// that changes from cell to cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    pub lipschitz: f64,
    pub noise_sigma: f64,
    pub horizon: usize,
    pub speed: f64,
    pub lateral_decay: f64,
    pub basin_radius: f64,
    pub confusion_cell: f64,
    /// Radians.
    pub confusion_spread: f64,
    pub confusion_seed: u64,
    pub feature_map: FeatureMap,
}

pub const CENTER: Point = [0.5, 0.5];

impl ScriptedPolicy {
    pub fn encode(&self, target: Point) -> [f64; 2] {
        [self.lipschitz * (target[0] - CENTER[0]), self.lipschitz * (target[1] - CENTER[1])]
    }

    pub fn decode(&self, action: &[f64]) -> Point {
        [action[0] / self.lipschitz + CENTER[0], action[1] / self.lipschitz + CENTER[1]]
    }

    /// Off-path heading at `x`, given the nearest path point.
    fn confused_heading(&self, x: Point, nearest: Point) -> Point {
        let away = [x[0] - nearest[0], x[1] - nearest[1]];
        let n = away[0].hypot(away[1]);
        let away = [away[0] / n, away[1] / n];
        let cell = ((x[0] / self.confusion_cell).floor() as i64, (x[1] / self.confusion_cell).floor() as i64);
        let key = self.confusion_seed
            ^ (cell.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (cell.1 as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let theta = ChaCha8Rng::seed_from_u64(key).gen_range(-1.0..=1.0) * self.confusion_spread;
        let (s, c) = theta.sin_cos();
        [c * away[0] - s * away[1], s * away[0] + c * away[1]]
    }

    /// Position targets for the next `horizon` steps, before noise.
    pub fn targets(&self, path: &Polyline, x: Point, offset: Option<Point>) -> Vec<Point> {
        let proj = path.project(x);
        let shift = offset.unwrap_or([0.0, 0.0]);
        let mut out = Vec::with_capacity(self.horizon);
        if proj.distance <= self.basin_radius {
            let off = [x[0] - proj.point[0], x[1] - proj.point[1]];
            let mut decay = 1.0;
            for tau in 0..self.horizon {
                decay *= self.lateral_decay;
                let p = path.at(proj.arc_length + (tau + 1) as f64 * self.speed);
                out.push([p[0] + decay * off[0] + shift[0], p[1] + decay * off[1] + shift[1]]);
            }
        } else {
            let h = self.confused_heading(x, proj.point);
            for tau in 0..self.horizon {
                let r = (tau + 1) as f64 * self.speed;
                out.push([x[0] + r * h[0] + shift[0], x[1] + r * h[1] + shift[1]]);
            }
        }
        out
    }

    /// One inference call: the chunk plus observation tokens.
    ///
    /// Always draws `2 * horizon` normals from `rng`, so two runs that call the
    /// policy at the same steps stay on the same noise stream.
    pub fn infer<R: Rng>(
        &self,
        path: &Polyline,
        x: Point,
        appearance: &[f64],
        offset: Option<Point>,
        rng: &mut R,
    ) -> (ActionChunk, TokenSequence) {
        let targets = self.targets(path, x, offset);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("sigma is finite");
        let mut values = Array3::zeros((1, self.horizon, 2));
        for (tau, tgt) in targets.iter().enumerate() {
            let a = self.encode(*tgt);
            for (dim, v) in a.iter().enumerate() {
                values[[0, tau, dim]] = v + noise.sample(rng);
            }
        }
        let chunk = ActionChunk::new(values).expect("finite by construction");
        (chunk, self.feature_map.tokens(x, appearance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::pool_features;

    fn policy() -> ScriptedPolicy {
        ScriptedPolicy {
            lipschitz: 2.0,
            noise_sigma: 0.0,
            horizon: 16,
            speed: 0.01,
            lateral_decay: 0.8,
            basin_radius: 0.15,
            confusion_cell: 0.05,
            confusion_spread: 0.8,
            confusion_seed: 3,
            feature_map: FeatureMap::new(7, 64, 3.0, 1.0, 4, 0.1).unwrap(),
        }
    }

    fn path() -> Polyline {
        Polyline::new(vec![[0.1, 0.2], [0.45, 0.3], [0.75, 0.45], [0.6, 0.8]]).unwrap()
    }

    #[test]
    fn noiseless_on_path_chunk_lies_on_path() {
        let (p, path) = (policy(), path());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = path.at(0.2);
        let (chunk, _) = p.infer(&path, x, &[0.0, 0.0], None, &mut rng);
        for tau in 0..16 {
            let a = chunk.values();
            let tgt = p.decode(&[a[[0, tau, 0]], a[[0, tau, 1]]]);
            assert!(path.project(tgt).distance < 1e-12);
            let expected = path.at(0.2 + (tau + 1) as f64 * 0.01);
            assert!((tgt[0] - expected[0]).abs() < 1e-12 && (tgt[1] - expected[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_audit_on_path() {
        let (p, path) = (policy(), path());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let s = rng.gen_range(0.0..path.length());
            let eps = rng.gen_range(0.0..0.05);
            let (x, y) = (path.at(s), path.at(s + eps));
            let (ca, _) = p.infer(&path, x, &[0.0, 0.0], None, &mut rng);
            let (cb, _) = p.infer(&path, y, &[0.0, 0.0], None, &mut rng);
            let diff = (&ca.values() - &cb.values()).mapv(|v| v * v).sum().sqrt() / 4.0;
            let gap = (x[0] - y[0]).hypot(x[1] - y[1]);
            // Per-step Euclidean difference, averaged over the horizon.
            assert!(diff <= p.lipschitz * eps + 1e-12, "diff {diff} > L*eps, gap {gap}");
        }
    }

    #[test]
    fn off_path_heads_away() {
        let (p, path) = (policy(), path());
        let x = [0.3, 0.6];
        let before = path.project(x).distance;
        assert!(before > p.basin_radius);
        let last = *p.targets(&path, x, None).last().unwrap();
        assert!(path.project(last).distance > before);
    }

    #[test]
    fn pooled_tokens_recover_features() {
        let p = policy();
        let f = p.feature_map.features([0.3, 0.4], &[0.1, -0.2]);
        let pooled = pool_features(&p.feature_map.tokens([0.3, 0.4], &[0.1, -0.2])).unwrap();
        for (a, b) in f.as_slice().iter().zip(pooled.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(FeatureMap::new(7, 64, 3.0, 1.0, 4, 0.1).unwrap(), p.feature_map);
    }
}
