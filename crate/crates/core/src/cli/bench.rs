//! Per-step cost of the monitoring stages on synthetic inputs.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::{CheckpointDatabase, CheckpointTemplate};
use crate::ensemble::Ensembler;
use crate::error::{Error, Result};
use crate::tide::compute_tide;
use crate::tracker::{cosine_similarities, csv_error, TrackerState};
use crate::types::{ActionChunk, FeatureVector, GuardConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Checkpoint slots `K`.
    pub slots: usize,
    /// Feature dimension `d`.
    pub dim: usize,
    /// Chunk horizon `T`.
    pub horizon: usize,
    /// Action dimension `D`.
    pub action_dim: usize,
    /// Independent runs; statistics are taken across runs.
    pub samples: usize,
    /// Control steps per run.
    pub steps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { slots: 10, dim: 64, horizon: 16, action_dim: 14, samples: 10, steps: 1000, seed: 0 }
    }
}

/// Mean and sample standard deviation of the per-step time, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageStats {
    pub mean: f64,
    pub std: f64,
}

impl StageStats {
    fn from_runs(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub tide: StageStats,
    pub cosine: StageStats,
    pub bookkeeping: StageStats,
    /// Timed as one span around all three stages.
    pub total: StageStats,
}

impl BenchReport {
    pub fn rows(&self) -> [(&'static str, StageStats); 4] {
        [
            ("tide", self.tide),
            ("cosine_similarity", self.cosine),
            ("slot_bookkeeping", self.bookkeeping),
            ("total", self.total),
        ]
    }
}

fn random_database(rng: &mut ChaCha8Rng, cfg: &BenchConfig) -> Result<CheckpointDatabase> {
    let templates = (0..cfg.slots)
        .map(|k| {
            let f = Array1::from_shape_simple_fn(cfg.dim, || rng.sample(StandardNormal));
            let action = (0..cfg.action_dim).map(|_| rng.sample(StandardNormal)).collect();
            CheckpointTemplate::new(k + 1, FeatureVector::new(f)?, "bench".into(), 0, action)
        })
        .collect::<Result<Vec<_>>>()?;
    CheckpointDatabase::new(templates)
}

/// Times the three monitoring stages over `samples` runs of `steps` steps.
///
/// Chunk ensembling is not timed; it runs with or without monitoring.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.slots == 0 || cfg.dim == 0 || cfg.horizon < 2 || cfg.action_dim == 0 || cfg.samples == 0 || cfg.steps == 0 {
        return Err(Error::Config("bench needs K, d, D, samples, steps >= 1 and T >= 2".into()));
    }
    let guard = GuardConfig::with_horizon(cfg.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_run = [vec![], vec![], vec![], vec![]];
    for _ in 0..cfg.samples {
        let db = random_database(&mut rng, cfg)?;
        let mut tracker = TrackerState::new(db, guard.peak_gap);
        let mut ens = Ensembler::from_config(&guard, 1, cfg.action_dim)?;
        let chunks: Vec<ActionChunk> = (0..cfg.steps)
            .map(|_| ActionChunk::new(Array3::from_shape_simple_fn((1, cfg.horizon, cfg.action_dim), || rng.sample(StandardNormal))))
            .collect::<Result<_>>()?;
        let features: Vec<FeatureVector> = (0..cfg.steps)
            .map(|_| FeatureVector::new(Array1::from_shape_simple_fn(cfg.dim, || rng.sample(StandardNormal))))
            .collect::<Result<_>>()?;

        let mut sums = [0.0f64; 4];
        for (chunk, feature) in chunks.iter().zip(&features) {
            let (executed, plan) = ens.push_chunk(chunk)?;
            let action = executed.into_raw_vec_and_offset().0;

            let start = Instant::now();
            let tide = compute_tide(&plan, chunk)?;
            let t1 = Instant::now();
            let sims = cosine_similarities(feature, tracker.database())?;
            let t2 = Instant::now();
            let sims = sims.as_slice().expect("contiguous");
            tracker.apply_rollback(sims, &action, guard.rollback_margin)?;
            tracker.update_slots(sims, &action)?;
            let k_star = tracker.latest_peaked_slot();
            let end = Instant::now();
            std::hint::black_box((tide, k_star));

            sums[0] += (t1 - start).as_secs_f64();
            sums[1] += (t2 - t1).as_secs_f64();
            sums[2] += (end - t2).as_secs_f64();
            sums[3] += (end - start).as_secs_f64();
        }
        for (stage, s) in per_run.iter_mut().zip(sums) {
            stage.push(s / cfg.steps as f64);
        }
    }
    let [tide, cosine, bookkeeping, total] = per_run.map(|xs| StageStats::from_runs(&xs));
    Ok(BenchReport { config: cfg.clone(), tide, cosine, bookkeeping, total })
}

/// Writes `stage,mean_s,std_s`.
pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["stage", "mean_s", "std_s"]).map_err(|e| csv_error(path, e))?;
    for (name, s) in report.rows() {
        w.write_record([name.to_string(), format!("{:e}", s.mean), format!("{:e}", s.std)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
