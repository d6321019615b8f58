//! Online slot tracking against the checkpoint library and the recovery
//! protocol.

mod guard;
mod telemetry;

pub use guard::{Guard, GuardOutput, RecoveryEvent};
pub(crate) use telemetry::csv_error;
pub use telemetry::{write_telemetry_csv, write_telemetry_jsonl, TelemetryRow};

use ndarray::Array1;

use crate::checkpoint::CheckpointDatabase;
use crate::ensemble::Ensembler;
use crate::error::{Error, Result};
use crate::types::FeatureVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    /// Running maximum similarity; `-inf` before the first update.
    pub s_max: f64,
    pub t_star: usize,
    pub snapshot_action: Vec<f64>,
    pub peaked: bool,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    slots: Vec<SlotState>,
    db: CheckpointDatabase,
    peak_gap: usize,
    t: usize,
}

/// `s = T_hat * f / |f|`, one entry per slot.
pub fn cosine_similarities(f: &FeatureVector, db: &CheckpointDatabase) -> Result<Array1<f64>> {
    if f.dim() != db.feature_dim() {
        return Err(Error::Dimension(format!(
            "feature has {} dims, database expects {}",
            f.dim(),
            db.feature_dim()
        )));
    }
    let norm = f.norm();
    if !(norm > 0.0) {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm feature is undefined".into()));
    }
    Ok(db.stacked_unit_matrix().dot(&f.view()) / norm)
}

impl TrackerState {
    /// Fresh trackers; snapshots start from the database recovery actions.
    pub fn new(db: CheckpointDatabase, peak_gap: usize) -> Self {
        let slots = db
            .templates()
            .iter()
            .map(|tpl| SlotState {
                s_max: f64::NEG_INFINITY,
                t_star: 0,
                snapshot_action: tpl.recovery_action.clone(),
                peaked: false,
            })
            .collect();
        Self { slots, db, peak_gap, t: 0 }
    }

    pub fn slots(&self) -> &[SlotState] {
        &self.slots
    }

    pub fn database(&self) -> &CheckpointDatabase {
        &self.db
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Timestep the next update will be stamped with.
    pub fn clock(&self) -> usize {
        self.t
    }

    pub fn peak_gap(&self) -> usize {
        self.peak_gap
    }

    /// Running-max update, peak test, then one clock tick.
    pub fn update_slots(&mut self, sims: &[f64], executed_action: &[f64]) -> Result<()> {
        if sims.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "{} similarities for {} slots",
                sims.len(),
                self.slots.len()
            )));
        }
        let t = self.t;
        for (slot, &s) in self.slots.iter_mut().zip(sims) {
            if s > slot.s_max {
                slot.s_max = s;
                slot.t_star = t;
                slot.snapshot_action.clear();
                slot.snapshot_action.extend_from_slice(executed_action);
            }
            slot.peaked = t - slot.t_star > self.peak_gap;
        }
        self.t += 1;
        Ok(())
    }

    /// Zero-based index of the peaked slot with the latest `t_star`; ties go
    /// to the larger index.
    pub fn latest_peaked_slot(&self) -> Option<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.peaked)
            .max_by_key(|(k, s)| (s.t_star, *k))
            .map(|(k, _)| k)
    }

    /// Returns the snapshot of the latest peaked slot and clears the
    /// ensembler. Slot state is left as is.
    pub fn recover(&self, ensembler: &mut Ensembler) -> Result<(usize, Vec<f64>)> {
        let k = self
            .latest_peaked_slot()
            .ok_or_else(|| Error::Protocol("recovery requested with no peaked slot".into()))?;
        ensembler.reset();
        Ok((k, self.slots[k].snapshot_action.clone()))
    }

    /// Slots to clear when the scene has rolled back.
    ///
    /// Evaluated on the live similarities before they are folded into the
    /// running maxima: slot `k` is cleared when it has dropped more than
    /// `margin` below its maximum and some earlier slot `j < k` whose maximum
    /// predates `k`'s is back within `margin` of that maximum. Un-peaked slots
    /// are cleared too, so a stale maximum cannot peak after the rollback.
    pub fn rollback_candidates(&self, sims: &[f64], margin: f64) -> Vec<usize> {
        let live = |j: usize| {
            let slot = &self.slots[j];
            slot.s_max.is_finite() && sims[j] >= slot.s_max - margin
        };
        (1..self.slots.len().min(sims.len()))
            .filter(|&k| {
                let stale = &self.slots[k];
                stale.s_max.is_finite()
                    && sims[k] < stale.s_max - margin
                    && (0..k).any(|j| live(j) && self.slots[j].t_star < stale.t_star)
            })
            .collect()
    }

    /// Resets slot `k` to its live similarity: not peaked, `t_star` now.
    pub fn rollback_clear(&mut self, k: usize, live_similarity: f64, executed_action: &[f64]) -> Result<()> {
        let now = self.t;
        let slot = self
            .slots
            .get_mut(k)
            .ok_or_else(|| Error::InvalidInput(format!("slot {k} out of range")))?;
        slot.s_max = live_similarity;
        slot.t_star = now;
        slot.snapshot_action.clear();
        slot.snapshot_action.extend_from_slice(executed_action);
        slot.peaked = false;
        Ok(())
    }

    /// Runs the rollback rule ahead of [`update_slots`](Self::update_slots)
    /// and returns the cleared slots.
    pub fn apply_rollback(&mut self, sims: &[f64], executed_action: &[f64], margin: f64) -> Result<Vec<usize>> {
        if sims.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "{} similarities for {} slots",
                sims.len(),
                self.slots.len()
            )));
        }
        let cleared = self.rollback_candidates(sims, margin);
        for &k in &cleared {
            self.rollback_clear(k, sims[k], executed_action)?;
            log::debug!("rollback: cleared slot {} at t = {}", k + 1, self.t);
        }
        Ok(cleared)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointTemplate;
    use crate::types::ActionChunk;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn db(rows: &[Vec<f64>]) -> CheckpointDatabase {
        let templates = rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                CheckpointTemplate::new(k + 1, FeatureVector::from_vec(r.clone()).unwrap(), "e".into(), k, vec![k as f64])
                    .unwrap()
            })
            .collect();
        CheckpointDatabase::new(templates).unwrap()
    }

    fn two_slot() -> TrackerState {
        TrackerState::new(db(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 3)
    }

    #[test]
    fn parallel_and_orthogonal() {
        let d = db(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let s = cosine_similarities(&FeatureVector::from_vec(vec![5.0, 0.0, 0.0]).unwrap(), &d).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert!(cosine_similarities(&FeatureVector::from_vec(vec![0.0; 3]).unwrap(), &d).is_err());
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let d = db(&rows);
        for _ in 0..20 {
            let f: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = cosine_similarities(&FeatureVector::from_vec(f.clone()).unwrap(), &d).unwrap();
            let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (k, row) in rows.iter().enumerate() {
                let rnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut dot = 0.0;
                for i in 0..32 {
                    dot += row[i] * f[i];
                }
                assert!((got[k] - dot / (fnorm * rnorm)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rising_similarity_never_peaks() {
        let mut tr = two_slot();
        for t in 0..50 {
            tr.update_slots(&[t as f64 * 0.01, -1.0], &[t as f64]).unwrap();
            assert!(!tr.slots()[0].peaked);
            assert_eq!(tr.slots()[0].t_star, t);
        }
    }

    #[test]
    fn plateau_peaks_after_gap() {
        let mut tr = two_slot();
        let trace = [0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
        let mut first_peak = None;
        for (t, &s) in trace.iter().enumerate() {
            tr.update_slots(&[s, 0.0], &[t as f64]).unwrap();
            if tr.slots()[0].peaked && first_peak.is_none() {
                first_peak = Some(t);
            }
        }
        assert_eq!(first_peak, Some(9));
        // Ties keep the earliest maximum.
        assert_eq!(tr.slots()[0].t_star, 5);
        assert_eq!(tr.slots()[0].snapshot_action, vec![5.0]);
    }

    #[test]
    fn latest_peaked_tie_rule() {
        let mut tr = two_slot();
        assert_eq!(tr.latest_peaked_slot(), None);
        for t in 0..20 {
            let s = if t == 3 { [1.0, 0.0] } else if t == 7 { [0.5, 1.0] } else { [0.2, 0.1] };
            tr.update_slots(&s, &[t as f64]).unwrap();
        }
        assert_eq!(tr.latest_peaked_slot(), Some(1));
        let mut tie = two_slot();
        for t in 0..10 {
            let s = if t == 2 { [1.0, 1.0] } else { [0.0, 0.0] };
            tie.update_slots(&s, &[t as f64]).unwrap();
        }
        assert_eq!(tie.slots()[0].t_star, tie.slots()[1].t_star);
        assert_eq!(tie.latest_peaked_slot(), Some(1));
    }

    #[test]
    fn recover_preserves_slots() {
        let mut tr = two_slot();
        for t in 0..10 {
            let s = if t == 1 { [0.9, 0.0] } else { [0.1, 0.0] };
            tr.update_slots(&s, &[t as f64 * 10.0]).unwrap();
        }
        let mut ens = Ensembler::new(1, 4, 1, 3, 0.01).unwrap();
        let chunk = ActionChunk::new(Array3::ones((1, 4, 1))).unwrap();
        ens.push_chunk(&chunk).unwrap();
        let before = tr.slots().to_vec();
        let (k, a) = tr.recover(&mut ens).unwrap();
        assert_eq!((k, a.clone()), (0, vec![10.0]));
        assert_eq!(tr.slots(), &before[..]);
        assert!(ens.is_empty());
        assert_eq!(tr.recover(&mut ens).unwrap().1, a);
        assert!(matches!(two_slot().recover(&mut ens), Err(Error::Protocol(_))));
    }

    #[test]
    fn rollback_rule() {
        let mut tr = TrackerState::new(db(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]), 2);
        // Pass slot 1 at t=2, slot 2 at t=6, then move on.
        let trace: Vec<[f64; 3]> = (0..12)
            .map(|t| match t {
                0 => [0.3, 0.3, 0.2],
                2 => [1.0, 0.2, 0.0],
                6 => [0.3, 1.0, 0.05],
                _ => [0.3, 0.3, 0.1],
            })
            .collect();
        for (t, s) in trace.iter().enumerate() {
            assert!(tr.apply_rollback(s, &[t as f64], 0.02).unwrap().is_empty(), "monotone progress at {t}");
            tr.update_slots(s, &[t as f64]).unwrap();
        }
        assert_eq!(tr.latest_peaked_slot(), Some(1));
        // Scene rolls back to slot 1.
        let live = [0.99, 0.4, 0.2];
        assert_eq!(tr.apply_rollback(&live, &[12.0], 0.02).unwrap(), vec![1]);
        tr.update_slots(&live, &[12.0]).unwrap();
        let cleared = &tr.slots()[1];
        assert!(!cleared.peaked);
        assert_eq!((cleared.s_max, cleared.t_star), (0.4, 12));
        assert_eq!(tr.latest_peaked_slot(), Some(0));
    }

    #[test]
    fn running_max_matches_replay_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sims = Array2::from_shape_fn((200, 4), |_| rng.gen_range(-1.0..1.0));
        let mut tr = TrackerState::new(db(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]), 5);
        for (t, row) in sims.outer_iter().enumerate() {
            tr.update_slots(row.as_slice().unwrap(), &[t as f64]).unwrap();
            for k in 0..4 {
                let col: Vec<f64> = (0..=t).map(|i| sims[[i, k]]).collect();
                let (arg, max) = col.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 { (i, v) } else { best }
                });
                let slot = &tr.slots()[k];
                assert_eq!(slot.s_max, max);
                assert_eq!(slot.t_star, arg);
                assert_eq!(slot.peaked, t - arg > 5);
            }
        }
    }
}
