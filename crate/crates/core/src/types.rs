//! Shared tensor types, the episode data model and its on-disk format.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::{self, Reals};

fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

/// A fresh chunk of predicted actions, shape `(batch, horizon, action_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    values: Array3<f64>,
}

impl ActionChunk {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (b, h, d) = values.dim();
        if b == 0 || h == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "action chunk needs non-empty axes, got ({b}, {h}, {d})"
            )));
        }
        check_finite("action chunk", values.iter())?;
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(Self { values })
    }

    /// Builds a single-lane chunk from `horizon` rows of length `action_dim`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged action chunk rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array3::from_shape_vec((1, rows.len(), d), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(values)
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.values.dim().1
    }

    pub fn action_dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.values
    }
}

/// The ensembled plan over the overlap window, as it stood before the
/// latest chunk was merged.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPlan {
    values: Array3<f64>,
    weights: Array1<f64>,
    anchor_time: usize,
}

impl AggregatedPlan {
    /// `weights[τ]` is the accumulated ensemble weight of step `τ`; zero marks
    /// a step with no prior prediction.
    pub fn new(values: Array3<f64>, weights: Array1<f64>, anchor_time: usize) -> Result<Self> {
        let (b, t, d) = values.dim();
        if b == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "plan needs non-empty batch and action axes, got ({b}, {t}, {d})"
            )));
        }
        if weights.len() != t {
            return Err(Error::Dimension(format!(
                "plan has {t} steps but {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("plan weights must be finite and >= 0".into()));
        }
        check_finite("aggregated plan", values.iter())?;
        Ok(Self { values, weights, anchor_time })
    }

    /// A plan where every step carries weight one.
    pub fn full(values: Array3<f64>, anchor_time: usize) -> Result<Self> {
        let t = values.dim().1;
        Self::new(values, Array1::ones(t), anchor_time)
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn overlap(&self) -> usize {
        self.values.dim().1
    }

    pub fn action_dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn anchor_time(&self) -> usize {
        self.anchor_time
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn is_valid_step(&self, tau: usize) -> bool {
        self.weights.get(tau).is_some_and(|w| *w > 0.0)
    }

    pub fn valid_steps(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }
}

/// A pooled policy-encoder feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Array1<f64>);

impl FeatureVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        check_finite("feature vector", values.iter())?;
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("owned feature vectors are contiguous")
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }
}

/// Observation-conditioned encoder tokens, shape `(L, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence(Array2<f64>);

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        check_finite("token sequence", tokens.iter())?;
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// One executed control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub feature: FeatureVector,
    /// The command actually executed at `t`.
    pub action: Vec<f64>,
    /// The chunk the policy predicted at `t`.
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub id: String,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub failure_onset: Option<usize>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks every invariant of the episode model.
    pub fn validate(&self) -> Result<()> {
        match (self.outcome, self.failure_onset) {
            (Outcome::Failure, None) => {
                return Err(Error::Schema(format!(
                    "episode {}: failure outcome requires failure_onset",
                    self.id
                )))
            }
            (Outcome::Success, Some(_)) => {
                return Err(Error::Schema(format!(
                    "episode {}: failure_onset set on a successful episode",
                    self.id
                )))
            }
            _ => {}
        }
        let Some(first) = self.steps.first() else {
            return Ok(());
        };
        if first.t != 0 {
            return Err(Error::Schema(format!(
                "episode {}: timesteps must start at 0, got {}",
                self.id, first.t
            )));
        }
        let state_dim = first.state.len();
        let feature_dim = first.feature.dim();
        let action_dim = first.action.len();
        let (batch, horizon, chunk_dim) = first.chunk.values().dim();
        if chunk_dim != action_dim {
            return Err(Error::Schema(format!(
                "episode {}: chunk action dim {chunk_dim} differs from action length {action_dim}",
                self.id
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 && step.t <= self.steps[i - 1].t {
                return Err(Error::Schema(format!(
                    "episode {}: timesteps not strictly increasing at step {i}",
                    self.id
                )));
            }
            let mismatch = |field: &str, want: usize, got: usize| {
                Error::Schema(format!(
                    "episode {}: step {i} field `{field}` has length {got}, expected {want}",
                    self.id
                ))
            };
            if step.state.len() != state_dim {
                return Err(mismatch("state", state_dim, step.state.len()));
            }
            if step.feature.dim() != feature_dim {
                return Err(mismatch("feature", feature_dim, step.feature.dim()));
            }
            if step.action.len() != action_dim {
                return Err(mismatch("action", action_dim, step.action.len()));
            }
            if step.chunk.values().dim() != (batch, horizon, action_dim) {
                let (b, h, d) = step.chunk.values().dim();
                return Err(Error::Schema(format!(
                    "episode {}: step {i} field `chunk` has shape ({b}, {h}, {d}), expected ({batch}, {horizon}, {action_dim})",
                    self.id
                )));
            }
            check_finite("state", step.state.iter())
                .and_then(|_| check_finite("action", step.action.iter()))
                .map_err(|e| Error::Schema(format!("episode {}: step {i}: {e}", self.id)))?;
        }
        if let Some(onset) = self.failure_onset {
            let last = self.steps.last().map_or(0, |s| s.t);
            if onset > last {
                return Err(Error::Schema(format!(
                    "episode {}: failure_onset {onset} beyond last timestep {last}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Slot timestamps for one annotated episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointAnnotation {
    pub episode_id: String,
    pub slot_timestamps: Vec<usize>,
}

impl CheckpointAnnotation {
    pub fn num_slots(&self) -> usize {
        self.slot_timestamps.len()
    }

    pub fn validate(&self, episode_len: usize) -> Result<()> {
        if self.slot_timestamps.is_empty() {
            return Err(Error::Schema(format!(
                "annotation for {} has no slot timestamps",
                self.episode_id
            )));
        }
        if self.slot_timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(format!(
                "annotation for {}: slot timestamps must be strictly increasing",
                self.episode_id
            )));
        }
        if let Some(&t) = self.slot_timestamps.iter().find(|&&t| t >= episode_len) {
            return Err(Error::Schema(format!(
                "annotation for {}: timestamp {t} outside episode of length {episode_len}",
                self.episode_id
            )));
        }
        Ok(())
    }
}

/// How per-dimension spread is normalized when computing the KDE bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdConvention {
    /// Divide by `E - 1`.
    #[default]
    Sample,
    /// Divide by `E`.
    Population,
}

/// Tunables shared by calibration, database construction and online guarding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    /// Miscoverage rate of the conformal threshold.
    pub alpha: f64,
    /// Frames trimmed from each end of an episode before scoring.
    pub trim_delta: usize,
    /// Steps without improvement after which a slot counts as peaked.
    pub peak_gap: usize,
    /// Fraction of variance retained by PCA before the KDE.
    pub variance_fraction: f64,
    /// Expected number of checkpoint slots, when known up front.
    pub num_slots: Option<usize>,
    /// Exponential ensembling coefficient.
    pub ensemble_m: f64,
    pub chunk_horizon: usize,
    /// Overlap length compared by TIDE; at most `chunk_horizon`.
    pub overlap: usize,
    /// Steps the recovery action is held, with flags suppressed.
    pub settle_window: usize,
    /// Similarity margin of the rollback clearing rule.
    pub rollback_margin: f64,
    pub std_convention: StdConvention,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            trim_delta: 10,
            peak_gap: 15,
            variance_fraction: 0.95,
            num_slots: None,
            ensemble_m: 0.01,
            chunk_horizon: 16,
            overlap: 15,
            settle_window: 10,
            rollback_margin: 0.02,
            std_convention: StdConvention::Sample,
        }
    }
}

impl GuardConfig {
    /// Defaults with the overlap tied to a given chunk horizon.
    pub fn with_horizon(chunk_horizon: usize) -> Self {
        Self {
            chunk_horizon,
            overlap: chunk_horizon.saturating_sub(1).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.peak_gap == 0 {
            return Err(Error::Config("peak_gap must be at least 1".into()));
        }
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "variance_fraction must lie in (0, 1], got {}",
                self.variance_fraction
            )));
        }
        if !(self.ensemble_m > 0.0 && self.ensemble_m.is_finite()) {
            return Err(Error::Config(format!("ensemble_m must be > 0, got {}", self.ensemble_m)));
        }
        if self.chunk_horizon == 0 {
            return Err(Error::Config("chunk_horizon must be at least 1".into()));
        }
        if self.overlap == 0 || self.overlap > self.chunk_horizon {
            return Err(Error::Config(format!(
                "overlap must lie in 1..={}, got {}",
                self.chunk_horizon, self.overlap
            )));
        }
        if self.num_slots == Some(0) {
            return Err(Error::Config("num_slots must be at least 1".into()));
        }
        if !(self.rollback_margin >= 0.0) {
            return Err(Error::Config("rollback_margin must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Episode and annotation files
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StepOut<'a> {
    t: usize,
    state: Reals<'a>,
    feature: Reals<'a>,
    action: Reals<'a>,
    chunk: Vec<Vec<Reals<'a>>>,
}

#[derive(Serialize)]
struct EpisodeOut<'a> {
    id: &'a str,
    outcome: Outcome,
    failure_onset: Option<usize>,
    steps: Vec<StepOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepIn {
    t: usize,
    state: Vec<f64>,
    feature: Vec<f64>,
    action: Vec<f64>,
    chunk: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeIn {
    id: String,
    outcome: Outcome,
    // Outer `None` means the key was absent; `null` is an explicit no-onset.
    #[serde(default, deserialize_with = "present")]
    failure_onset: Option<Option<usize>>,
    steps: Vec<StepIn>,
}

fn present<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<usize>>, D::Error> {
    Option::<usize>::deserialize(d).map(Some)
}

fn chunk_from_nested(nested: Vec<Vec<Vec<f64>>>, context: &str) -> Result<ActionChunk> {
    let b = nested.len();
    let h = nested.first().map_or(0, Vec::len);
    let d = nested.first().and_then(|l| l.first()).map_or(0, Vec::len);
    if nested.iter().any(|lane| lane.len() != h || lane.iter().any(|row| row.len() != d)) {
        return Err(Error::Schema(format!("{context}: ragged `chunk` array")));
    }
    let flat: Vec<f64> = nested.into_iter().flatten().flatten().collect();
    let values = Array3::from_shape_vec((b, h, d), flat)
        .map_err(|e| Error::Schema(format!("{context}: `chunk`: {e}")))?;
    ActionChunk::new(values).map_err(|e| Error::Schema(format!("{context}: `chunk`: {e}")))
}

fn chunk_to_nested(chunk: &ActionChunk) -> Vec<Vec<Reals<'_>>> {
    let (_, h, d) = chunk.values.dim();
    let flat = chunk.values.as_slice().expect("owned chunks are contiguous");
    flat.chunks_exact(h * d)
        .map(|lane| lane.chunks_exact(d).map(Reals).collect())
        .collect()
}

/// Reads and validates one episode file.
pub fn load_episode(path: &Path) -> Result<EpisodeRecord> {
    let raw: EpisodeIn = serial::read_json(path)?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for (i, s) in raw.steps.into_iter().enumerate() {
        let context = format!("{}: step {i}", path.display());
        let feature = FeatureVector::from_vec(s.feature)
            .map_err(|e| Error::Schema(format!("{context}: `feature`: {e}")))?;
        let chunk = chunk_from_nested(s.chunk, &context)?;
        steps.push(StepRecord { t: s.t, state: s.state, feature, action: s.action, chunk });
    }
    let episode = EpisodeRecord {
        id: raw.id,
        steps,
        outcome: raw.outcome,
        failure_onset: raw.failure_onset.ok_or_else(|| {
            Error::Schema(format!("{}: missing field `failure_onset`", path.display()))
        })?,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn save_episode(episode: &EpisodeRecord, path: &Path) -> Result<()> {
    episode.validate()?;
    let out = EpisodeOut {
        id: &episode.id,
        outcome: episode.outcome,
        failure_onset: episode.failure_onset,
        steps: episode
            .steps
            .iter()
            .map(|s| StepOut {
                t: s.t,
                state: Reals(&s.state),
                feature: Reals(s.feature.as_slice()),
                action: Reals(&s.action),
                chunk: chunk_to_nested(&s.chunk),
            })
            .collect(),
    };
    serial::write_json(path, &out)
}

/// Loads every `*.json` episode in a directory, sorted by file name.
pub fn load_episode_dir(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_episode = path.extension().is_some_and(|e| e == "json")
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("episode"));
        if is_episode {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_episode(p)).collect()
}

pub fn load_annotations(path: &Path) -> Result<Vec<CheckpointAnnotation>> {
    serial::read_json(path)
}

pub fn save_annotations(annotations: &[CheckpointAnnotation], path: &Path) -> Result<()> {
    serial::write_json(path, annotations)
}

/// Stacks a list of equal-length vectors into a row matrix.
pub(crate) fn stack_rows<'a>(rows: impl IntoIterator<Item = ArrayView1<'a, f64>>) -> Result<Array2<f64>> {
    let rows: Vec<_> = rows.into_iter().collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot stack zero rows".into()));
    }
    ndarray::stack(Axis(0), &rows).map_err(|e| Error::Dimension(e.to_string()))
}
