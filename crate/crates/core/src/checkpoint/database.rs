use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::{self, Reals};
use crate::types::{stack_rows, CheckpointAnnotation, EpisodeRecord, FeatureVector, GuardConfig};

use super::kde::select_template;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTemplate {
    /// One-based slot index.
    pub slot: usize,
    pub feature: FeatureVector,
    pub unit_feature: FeatureVector,
    pub source_episode: String,
    pub source_timestep: usize,
    pub recovery_action: Vec<f64>,
}

impl CheckpointTemplate {
    pub fn new(
        slot: usize,
        feature: FeatureVector,
        source_episode: String,
        source_timestep: usize,
        recovery_action: Vec<f64>,
    ) -> Result<Self> {
        let norm = feature.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput(format!("slot {slot}: template feature has zero norm")));
        }
        let unit_feature = FeatureVector::new(&feature.view() / norm)?;
        Ok(Self { slot, feature, unit_feature, source_episode, source_timestep, recovery_action })
    }
}

/// Per-slot templates plus the stacked unit matrix used for live matching.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDatabase {
    templates: Vec<CheckpointTemplate>,
    feature_dim: usize,
    stacked: Array2<f64>,
}

impl CheckpointDatabase {
    pub fn new(templates: Vec<CheckpointTemplate>) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(Error::Schema("checkpoint database has no templates".into()));
        };
        let feature_dim = first.feature.dim();
        if feature_dim == 0 {
            return Err(Error::Schema("template features are empty".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            if t.slot != i + 1 {
                return Err(Error::Schema(format!(
                    "templates must be ordered by slot 1..=K; position {i} holds slot {}",
                    t.slot
                )));
            }
            if t.feature.dim() != feature_dim {
                return Err(Error::Schema(format!(
                    "slot {} feature has {} dims, expected {feature_dim}",
                    t.slot,
                    t.feature.dim()
                )));
            }
        }
        let stacked = stack_rows(templates.iter().map(|t| t.unit_feature.view()))?;
        Ok(Self { templates, feature_dim, stacked })
    }

    pub fn templates(&self) -> &[CheckpointTemplate] {
        &self.templates
    }

    pub fn num_slots(&self) -> usize {
        self.templates.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `K x d` matrix of unit templates.
    pub fn stacked_unit_matrix(&self) -> ArrayView2<'_, f64> {
        self.stacked.view()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatabaseOut {
            feature_dim: self.feature_dim,
            templates: self
                .templates
                .iter()
                .map(|t| TemplateOut {
                    slot: t.slot,
                    feature: Reals(t.feature.as_slice()),
                    source_episode: &t.source_episode,
                    source_timestep: t.source_timestep,
                    recovery_action: Reals(&t.recovery_action),
                })
                .collect(),
        };
        serial::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: DatabaseIn = serial::read_json(path)?;
        let context = |e: Error| Error::Schema(format!("{}: {e}", path.display()));
        let templates = raw
            .templates
            .into_iter()
            .map(|t| {
                let feature = FeatureVector::from_vec(t.feature)?;
                CheckpointTemplate::new(t.slot, feature, t.source_episode, t.source_timestep, t.recovery_action)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(context)?;
        let db = Self::new(templates).map_err(context)?;
        if db.feature_dim != raw.feature_dim {
            return Err(Error::Schema(format!(
                "{}: feature_dim {} disagrees with template length {}",
                path.display(),
                raw.feature_dim,
                db.feature_dim
            )));
        }
        Ok(db)
    }
}

#[derive(Serialize)]
struct TemplateOut<'a> {
    slot: usize,
    feature: Reals<'a>,
    source_episode: &'a str,
    source_timestep: usize,
    recovery_action: Reals<'a>,
}

#[derive(Serialize)]
struct DatabaseOut<'a> {
    feature_dim: usize,
    templates: Vec<TemplateOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateIn {
    slot: usize,
    feature: Vec<f64>,
    source_episode: String,
    source_timestep: usize,
    recovery_action: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatabaseIn {
    feature_dim: usize,
    templates: Vec<TemplateIn>,
}

pub fn save_database(db: &CheckpointDatabase, path: &Path) -> Result<()> {
    db.save(path)
}

pub fn load_database(path: &Path) -> Result<CheckpointDatabase> {
    CheckpointDatabase::load(path)
}

/// Builds one template per slot from the annotated frames.
///
/// Episodes enter the per-slot clouds in annotation order, which fixes the
/// tie rule of the template selection.
pub fn build_database(
    episodes: &[EpisodeRecord],
    annotations: &[CheckpointAnnotation],
    cfg: &GuardConfig,
) -> Result<CheckpointDatabase> {
    let Some(first) = annotations.first() else {
        return Err(Error::InvalidInput("no checkpoint annotations supplied".into()));
    };
    let k = first.num_slots();
    if let Some(expected) = cfg.num_slots {
        if expected != k {
            return Err(Error::Config(format!("configured num_slots {expected} but annotations carry {k}")));
        }
    }
    let by_id: HashMap<&str, &EpisodeRecord> = episodes.iter().map(|e| (e.id.as_str(), e)).collect();

    // frames[e][k] = (episode, step index)
    let mut frames: Vec<(&EpisodeRecord, Vec<usize>)> = Vec::with_capacity(annotations.len());
    for ann in annotations {
        if ann.num_slots() != k {
            return Err(Error::Schema(format!(
                "annotation for {} has {} slots, expected {k}",
                ann.episode_id,
                ann.num_slots()
            )));
        }
        let episode = by_id.get(ann.episode_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("annotation references unknown episode {}", ann.episode_id))
        })?;
        let last_t = episode.steps.last().map_or(0, |s| s.t + 1);
        ann.validate(last_t)?;
        let indices = ann
            .slot_timestamps
            .iter()
            .map(|&ts| {
                episode.steps.iter().position(|s| s.t == ts).ok_or_else(|| {
                    Error::InvalidInput(format!("episode {} has no step at t = {ts}", episode.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push((episode, indices));
    }

    let mut templates = Vec::with_capacity(k);
    for slot in 0..k {
        let cloud = stack_rows(frames.iter().map(|(ep, idx)| ep.steps[idx[slot]].feature.view()))?;
        let winner = select_template(cloud.view(), cfg.variance_fraction, cfg.std_convention)?;
        let (episode, idx) = &frames[winner];
        let step = &episode.steps[idx[slot]];
        templates.push(CheckpointTemplate::new(
            slot + 1,
            step.feature.clone(),
            episode.id.clone(),
            step.t,
            step.action.clone(),
        )?);
    }
    CheckpointDatabase::new(templates)
}

/// Stacks an iterator of features into a row matrix.
pub fn feature_matrix<'a>(features: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Array2<f64>> {
    stack_rows(features.into_iter().map(|f| f.view()))
}

/// Arithmetic mean of the tokens.
pub fn pool_features(tokens: &crate::types::TokenSequence) -> Result<FeatureVector> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot pool an empty token sequence".into()));
    }
    let mut acc = Array1::zeros(tokens.dim());
    for row in tokens.view().outer_iter() {
        acc += &row;
    }
    FeatureVector::new(acc / tokens.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ActionChunk, Outcome, StepRecord, TokenSequence};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn episode(id: &str, rng: &mut ChaCha8Rng, n: usize) -> EpisodeRecord {
        let steps = (0..n)
            .map(|t| {
                let feature: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let action = vec![rng.gen_range(-1.0..1.0), t as f64];
                StepRecord {
                    t,
                    state: vec![0.0],
                    feature: FeatureVector::from_vec(feature).unwrap(),
                    action: action.clone(),
                    chunk: ActionChunk::from_rows(&[action]).unwrap(),
                }
            })
            .collect();
        EpisodeRecord { id: id.into(), steps, outcome: Outcome::Success, failure_onset: None }
    }

    #[test]
    fn pooling() {
        let one = TokenSequence::new(array![[1.5, -2.0]]).unwrap();
        assert_eq!(pool_features(&one).unwrap().as_slice(), &[1.5, -2.0]);
        let two = TokenSequence::new(array![[0.0, 0.0], [2.0, 4.0]]).unwrap();
        assert_eq!(pool_features(&two).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn pooling_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens = Array2::from_shape_fn((100, 7), |_| rng.gen_range(-5.0..5.0));
        let pooled = pool_features(&TokenSequence::new(tokens.clone()).unwrap()).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for i in 0..100 {
                s += tokens[[i, j]];
            }
            assert!((pooled.as_slice()[j] - s / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_episode_uses_its_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = episode("e0", &mut rng, 12);
        let ann = CheckpointAnnotation { episode_id: "e0".into(), slot_timestamps: vec![2, 7, 11] };
        let db = build_database(std::slice::from_ref(&ep), &[ann], &GuardConfig::default()).unwrap();
        assert_eq!(db.num_slots(), 3);
        for (tpl, ts) in db.templates().iter().zip([2, 7, 11]) {
            assert_eq!(tpl.feature, ep.steps[ts].feature);
            assert_eq!(tpl.recovery_action, ep.steps[ts].action);
            assert_eq!(tpl.source_timestep, ts);
            assert!((tpl.unit_feature.norm() - 1.0).abs() < 1e-9);
        }
        for (row, tpl) in db.stacked_unit_matrix().outer_iter().zip(db.templates()) {
            assert_eq!(row, tpl.unit_feature.view());
        }
    }

    #[test]
    fn duplicate_episodes_give_identical_templates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = episode("a", &mut rng, 8);
        let mut b = a.clone();
        b.id = "b".into();
        let anns = vec![
            CheckpointAnnotation { episode_id: "a".into(), slot_timestamps: vec![1, 5] },
            CheckpointAnnotation { episode_id: "b".into(), slot_timestamps: vec![1, 5] },
        ];
        let db = build_database(&[a.clone(), b], &anns, &GuardConfig::default()).unwrap();
        assert_eq!(db.templates()[0].feature, a.steps[1].feature);
        assert_eq!(db.templates()[1].feature, a.steps[5].feature);
    }

    #[test]
    fn annotation_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = episode("e", &mut rng, 5);
        let cfg = GuardConfig::default();
        let missing = CheckpointAnnotation { episode_id: "x".into(), slot_timestamps: vec![1] };
        assert!(build_database(std::slice::from_ref(&ep), &[missing], &cfg).is_err());
        let late = CheckpointAnnotation { episode_id: "e".into(), slot_timestamps: vec![1, 9] };
        assert!(build_database(std::slice::from_ref(&ep), &[late], &cfg).is_err());
        let anns = vec![
            CheckpointAnnotation { episode_id: "e".into(), slot_timestamps: vec![1, 2] },
            CheckpointAnnotation { episode_id: "e".into(), slot_timestamps: vec![1] },
        ];
        assert!(build_database(std::slice::from_ref(&ep), &anns, &cfg).is_err());
        let k3 = GuardConfig { num_slots: Some(3), ..cfg };
        let ok = CheckpointAnnotation { episode_id: "e".into(), slot_timestamps: vec![1, 2] };
        assert!(matches!(build_database(&[ep], &[ok], &k3), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_empty_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let templates = (1..=5)
            .map(|slot| {
                let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let a: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                CheckpointTemplate::new(slot, FeatureVector::from_vec(f).unwrap(), format!("ep{slot}"), slot * 3, a)
                    .unwrap()
            })
            .collect();
        let db = CheckpointDatabase::new(templates).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        db.save(&path).unwrap();
        assert_eq!(CheckpointDatabase::load(&path).unwrap(), db);

        std::fs::write(&path, r#"{"feature_dim":4,"templates":[]}"#).unwrap();
        assert!(CheckpointDatabase::load(&path).is_err());
    }
}
