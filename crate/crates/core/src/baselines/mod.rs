//! Reference out-of-distribution detectors and episode-level detection metrics.
//!
//! Every detector goes through the same conformal thresholding as TIDE, so
//! comparisons differ only in the per-frame score.

mod clusters;
mod mahalanobis;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::conformal::{cp_threshold_scores, replay_tide, trimmed_frames};
use crate::error::{Error, Result};
use crate::tracker::csv_error;
use crate::types::{EpisodeRecord, GuardConfig, Outcome};

pub use clusters::{fit_clusters, score_clusters, CentroidModel, DEFAULT_CLUSTERS};
pub use mahalanobis::{fit_mahalanobis, score_mahalanobis, GaussianModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detector {
    Tide,
    Mahalanobis,
    Clusters,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::Tide, Detector::Mahalanobis, Detector::Clusters];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Tide => "tide",
            Detector::Mahalanobis => "mahalanobis",
            Detector::Clusters => "clusters",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tide" => Ok(Detector::Tide),
            "mahalanobis" => Ok(Detector::Mahalanobis),
            "clusters" | "clustering" | "kmeans" => Ok(Detector::Clusters),
            other => Err(Error::Config(format!("unknown detector `{other}`"))),
        }
    }
}

/// Parses a comma-separated detector list.
pub fn parse_detectors(list: &str) -> Result<Vec<Detector>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Per-frame scores of one episode with its ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEpisode {
    pub id: String,
    /// `(t, score)` for every scored frame.
    pub frames: Vec<(usize, f64)>,
    /// `None` for a successful episode.
    pub failure_onset: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    /// NaN without failure episodes.
    pub tpr: f64,
    /// NaN without successful episodes.
    pub tnr: f64,
    /// Mean of whichever rates are defined.
    pub balanced_accuracy: f64,
    pub n_failures: usize,
    pub n_successes: usize,
}

impl DetectionMetrics {
    pub fn n_episodes(&self) -> usize {
        self.n_failures + self.n_successes
    }
}

/// Episode-level detection: a failure counts as detected when any frame at
/// or after its onset scores above `q_hat`; a success counts as a true
/// negative when no frame does.
pub fn detector_eval(episodes: &[ScoredEpisode], q_hat: f64) -> DetectionMetrics {
    let (mut tp, mut n_fail, mut tn, mut n_succ) = (0usize, 0usize, 0usize, 0usize);
    for ep in episodes {
        match ep.failure_onset {
            Some(onset) => {
                n_fail += 1;
                if ep.frames.iter().any(|&(t, s)| t >= onset && s > q_hat) {
                    tp += 1;
                }
            }
            None => {
                n_succ += 1;
                if !ep.frames.iter().any(|&(_, s)| s > q_hat) {
                    tn += 1;
                }
            }
        }
    }
    let rate = |hit: usize, n: usize| if n == 0 { f64::NAN } else { hit as f64 / n as f64 };
    let (tpr, tnr) = (rate(tp, n_fail), rate(tn, n_succ));
    let defined: Vec<f64> = [tpr, tnr].into_iter().filter(|r| !r.is_nan()).collect();
    let balanced_accuracy =
        if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    DetectionMetrics { tpr, tnr, balanced_accuracy, n_failures: n_fail, n_successes: n_succ }
}

/// A fitted per-frame scorer.
#[derive(Debug, Clone)]
pub enum FrameScorer {
    Tide(GuardConfig),
    Mahalanobis(GaussianModel),
    Clusters(CentroidModel),
}

impl FrameScorer {
    pub fn detector(&self) -> Detector {
        match self {
            FrameScorer::Tide(_) => Detector::Tide,
            FrameScorer::Mahalanobis(_) => Detector::Mahalanobis,
            FrameScorer::Clusters(_) => Detector::Clusters,
        }
    }

    /// Scores of the frames in `range`; frames with an invalid TIDE are skipped.
    pub fn score_episode(&self, ep: &EpisodeRecord, range: std::ops::Range<usize>) -> Result<Vec<(usize, f64)>> {
        match self {
            FrameScorer::Tide(cfg) => {
                let tide = replay_tide(ep, cfg)?;
                Ok(range.filter(|&i| tide[i].valid).map(|i| (ep.steps[i].t, tide[i].value)).collect())
            }
            FrameScorer::Mahalanobis(m) => {
                range.map(|i| Ok((ep.steps[i].t, m.score(ep.steps[i].feature.view())?))).collect()
            }
            FrameScorer::Clusters(m) => {
                range.map(|i| Ok((ep.steps[i].t, m.score(ep.steps[i].feature.view())?))).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub detectors: Vec<Detector>,
    pub clusters: usize,
    pub seed: u64,
    pub scenario: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { detectors: Detector::ALL.to_vec(), clusters: DEFAULT_CLUSTERS, seed: 0, scenario: "default".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub detector: Detector,
    pub scenario: String,
    pub q_hat: f64,
    pub metrics: DetectionMetrics,
}

/// Fits, calibrates and evaluates each detector.
///
/// The calibration episodes (all successful) are split in order: the first
/// half fits the baseline models, the second half sets every detector's
/// threshold at `cfg.alpha`. Calibration and evaluation episodes alike drop
/// `cfg.trim_delta` frames at both ends, so every detector sees the same
/// windows.
pub fn evaluate_detectors(
    calibration: &[EpisodeRecord],
    evaluation: &[EpisodeRecord],
    cfg: &GuardConfig,
    opts: &EvalOptions,
) -> Result<Vec<DetectorReport>> {
    cfg.validate()?;
    if let Some(bad) = calibration.iter().find(|e| e.outcome != Outcome::Success) {
        return Err(Error::Protocol(format!("calibration episode {} is labelled failure", bad.id)));
    }
    if calibration.len() < 2 {
        return Err(Error::InvalidInput("need at least two calibration episodes to fit and calibrate".into()));
    }
    let (fit_set, cal_set) = calibration.split_at(calibration.len() / 2);
    let delta = cfg.trim_delta;

    let needs_fit = opts.detectors.iter().any(|d| *d != Detector::Tide);
    let fit_features = if needs_fit {
        let rows: Vec<_> = fit_set
            .iter()
            .flat_map(|ep| trimmed_frames(ep.len(), delta).map(move |i| ep.steps[i].feature.view()))
            .collect();
        if rows.is_empty() {
            return Err(Error::InvalidInput("no calibration frames left after trimming".into()));
        }
        Some(ndarray::stack(ndarray::Axis(0), &rows).map_err(|e| Error::Dimension(e.to_string()))?)
    } else {
        None
    };
    let fit_features: Option<Array2<f64>> = fit_features;

    let mut reports = Vec::new();
    for &detector in &opts.detectors {
        let scorer = match detector {
            Detector::Tide => FrameScorer::Tide(cfg.clone()),
            Detector::Mahalanobis => {
                FrameScorer::Mahalanobis(fit_mahalanobis(fit_features.as_ref().unwrap().view(), cfg.variance_fraction)?)
            }
            Detector::Clusters => FrameScorer::Clusters(fit_clusters(
                fit_features.as_ref().unwrap().view(),
                opts.clusters,
                cfg.variance_fraction,
                opts.seed,
            )?),
        };
        let mut cal_scores = Vec::new();
        for ep in cal_set {
            cal_scores.extend(scorer.score_episode(ep, trimmed_frames(ep.len(), delta))?.into_iter().map(|(_, s)| s));
        }
        let q_hat = cp_threshold_scores(&cal_scores, cfg.alpha)?;
        let scored = evaluation
            .iter()
            .map(|ep| {
                Ok(ScoredEpisode {
                    id: ep.id.clone(),
                    frames: scorer.score_episode(ep, trimmed_frames(ep.len(), delta))?,
                    failure_onset: ep.failure_onset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let metrics = detector_eval(&scored, q_hat);
        log::info!(
            "{detector}: q_hat {q_hat:.4e}, TPR {:.3}, TNR {:.3}, Acc {:.3}",
            metrics.tpr,
            metrics.tnr,
            metrics.balanced_accuracy
        );
        reports.push(DetectorReport { detector, scenario: opts.scenario.clone(), q_hat, metrics });
    }
    Ok(reports)
}

fn rate(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

/// Writes `detector,scenario,TPR,TNR,Acc,n_episodes`, one row per report.
pub fn write_report_csv(path: &Path, reports: &[DetectorReport]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["detector", "scenario", "TPR", "TNR", "Acc", "n_episodes"]).map_err(|e| csv_error(path, e))?;
    for r in reports {
        let m = &r.metrics;
        w.write_record([
            r.detector.name().to_string(),
            r.scenario.clone(),
            rate(m.tpr),
            rate(m.tnr),
            rate(m.balanced_accuracy),
            m.n_episodes().to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
