//! Split-conformal calibration of the failure threshold.
//!
//! With `n` calibration scores and miscoverage `alpha`, the threshold is the
//! `k`-th smallest score where `k = ceil((n + 1)(1 - alpha))`. When `k > n`
//! no finite order statistic carries the guarantee and the threshold is `+inf`.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::ensemble::Ensembler;
use crate::error::{Error, Result};
use crate::serial::{self, Real};
use crate::tide::{compute_tide, TideScore};
use crate::types::{EpisodeRecord, GuardConfig, Outcome};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCorpus {
    pub scores: Vec<f64>,
    /// `(episode_id, frame)` of every score.
    pub source: Vec<(String, usize)>,
}

impl CalibrationCorpus {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidInput("calibration scores must be finite and >= 0".into()));
        }
        let source = (0..scores.len()).map(|i| (String::new(), i)).collect();
        Ok(Self { scores, source })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// SHA-256 over the score bit patterns, in corpus order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.scores {
            hasher.update(s.to_bits().to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub q_hat: f64,
    pub alpha: f64,
    pub n: usize,
    pub corpus_digest: String,
}

impl Threshold {
    pub fn is_finite(&self) -> bool {
        self.q_hat.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serial::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Threshold = serial::read_json(path)?;
        if !(t.alpha > 0.0 && t.alpha < 1.0) || t.n == 0 || t.q_hat.is_nan() {
            return Err(Error::Schema(format!("{}: malformed threshold", path.display())));
        }
        Ok(t)
    }
}

// q_hat may be +inf, written as the string "inf".
impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("Threshold", 4)?;
        if self.q_hat.is_finite() {
            st.serialize_field("q_hat", &Real(self.q_hat))?;
        } else {
            st.serialize_field("q_hat", "inf")?;
        }
        st.serialize_field("alpha", &Real(self.alpha))?;
        st.serialize_field("n", &self.n)?;
        st.serialize_field("corpus_digest", &self.corpus_digest)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum QHat {
            Number(f64),
            Text(String),
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            q_hat: QHat,
            alpha: f64,
            n: usize,
            corpus_digest: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        let q_hat = match raw.q_hat {
            QHat::Number(x) => x,
            QHat::Text(s) if s == "inf" => f64::INFINITY,
            QHat::Text(s) => return Err(serde::de::Error::custom(format!("bad q_hat `{s}`"))),
        };
        Ok(Threshold { q_hat, alpha: raw.alpha, n: raw.n, corpus_digest: raw.corpus_digest })
    }
}

/// One-indexed rank of the conformal order statistic.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    // Absorb the rounding of the product so that exact integers stay exact.
    (x - 4.0 * f64::EPSILON * x).ceil().max(1.0) as usize
}

pub fn cp_threshold_scores(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("calibration corpus is empty".into()));
    }
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k > n {
        log::warn!(
            "conformal rank {k} exceeds corpus size {n} at alpha = {alpha}; threshold is +inf \
             (need at least {} scores for a finite threshold)",
            min_corpus_size(alpha)
        );
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

pub fn cp_threshold(corpus: &CalibrationCorpus, alpha: f64) -> Result<Threshold> {
    let q_hat = cp_threshold_scores(&corpus.scores, alpha)?;
    Ok(Threshold { q_hat, alpha, n: corpus.len(), corpus_digest: corpus.digest() })
}

/// Smallest corpus size with a finite threshold at this `alpha`.
pub fn min_corpus_size(alpha: f64) -> usize {
    let mut n = ((1.0 - alpha) / alpha).floor().max(1.0) as usize;
    while conformal_rank(n, alpha) > n {
        n += 1;
    }
    n
}

/// TIDE of every frame of an episode, replayed through a fresh ensembler.
pub fn replay_tide(episode: &EpisodeRecord, cfg: &GuardConfig) -> Result<Vec<TideScore>> {
    let Some(first) = episode.steps.first() else {
        return Ok(Vec::new());
    };
    let mut ens = Ensembler::new(
        first.chunk.batch(),
        first.chunk.horizon(),
        first.chunk.action_dim(),
        cfg.overlap.min(first.chunk.horizon()),
        cfg.ensemble_m,
    )?;
    episode
        .steps
        .iter()
        .map(|step| {
            let (_, plan) = ens.push_chunk(&step.chunk)?;
            compute_tide(&plan, &step.chunk)
        })
        .collect()
}

/// Frame indices kept after trimming `delta` frames from both ends.
pub fn trimmed_frames(len: usize, delta: usize) -> std::ops::Range<usize> {
    if len <= 2 * delta {
        0..0
    } else {
        delta..len - delta
    }
}

/// Collects trimmed per-frame TIDE values from successful episodes.
pub fn collect_scores(episodes: &[EpisodeRecord], cfg: &GuardConfig) -> Result<CalibrationCorpus> {
    if let Some(bad) = episodes.iter().find(|e| e.outcome != Outcome::Success) {
        return Err(Error::Protocol(format!(
            "calibration uses only successful episodes; {} is labelled failure",
            bad.id
        )));
    }
    let mut ordered: Vec<&EpisodeRecord> = episodes.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut scores = Vec::new();
    let mut source = Vec::new();
    let mut used = 0usize;
    for episode in ordered {
        if episode.len() <= 2 * cfg.trim_delta {
            log::warn!(
                "skipping episode {} ({} frames) shorter than twice the trim of {}",
                episode.id,
                episode.len(),
                cfg.trim_delta
            );
            continue;
        }
        used += 1;
        let tide = replay_tide(episode, cfg)?;
        for frame in trimmed_frames(episode.len(), cfg.trim_delta) {
            if tide[frame].valid {
                scores.push(tide[frame].value);
                source.push((episode.id.clone(), episode.steps[frame].t));
            }
        }
    }
    if used == 0 || scores.is_empty() {
        return Err(Error::InvalidInput(
            "no calibration frames left after trimming every episode".into(),
        ));
    }
    Ok(CalibrationCorpus { scores, source })
}
