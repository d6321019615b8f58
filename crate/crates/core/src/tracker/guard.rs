use crate::checkpoint::CheckpointDatabase;
use crate::ensemble::Ensembler;
use crate::error::{Error, Result};
use crate::tide::{compute_tide, is_failing, TideScore};
use crate::types::{ActionChunk, FeatureVector, GuardConfig};

use super::{cosine_similarities, TrackerState};

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryEvent {
    /// Step at which the flag fired.
    pub t: usize,
    /// Zero-based target slot.
    pub slot: usize,
    pub t_star: usize,
    pub action: Vec<f64>,
}

/// Everything the guard decided at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardOutput {
    pub t: usize,
    /// Command to execute, flattened `(batch, action_dim)`.
    pub action: Vec<f64>,
    pub tide: TideScore,
    pub flagged: bool,
    pub similarities: Vec<f64>,
    pub peaked: Vec<bool>,
    pub recovered: bool,
    /// Zero-based latest peaked slot after this step's update.
    pub k_star: Option<usize>,
    pub respawning: bool,
    pub cleared: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Respawn {
    action: Vec<f64>,
    remaining: usize,
}

/// The online inference loop: ensemble, score, track, and respawn on failure.
#[derive(Debug, Clone)]
pub struct Guard {
    cfg: GuardConfig,
    ensembler: Ensembler,
    tracker: TrackerState,
    q_hat: f64,
    respawn: Option<Respawn>,
    recoveries: Vec<RecoveryEvent>,
    intervene: bool,
    /// Pushes left before flags count again.
    warmup: usize,
    t: usize,
}

impl Guard {
    pub fn new(cfg: GuardConfig, db: CheckpointDatabase, q_hat: f64, batch: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if q_hat.is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        if let Some(k) = cfg.num_slots {
            if k != db.num_slots() {
                return Err(Error::Config(format!(
                    "configured num_slots {k} but the database holds {}",
                    db.num_slots()
                )));
            }
        }
        if let Some(bad) = db.templates().iter().find(|t| t.recovery_action.len() != batch * action_dim) {
            return Err(Error::Dimension(format!(
                "slot {} recovery action has {} entries, expected {}",
                bad.slot,
                bad.recovery_action.len(),
                batch * action_dim
            )));
        }
        let ensembler = Ensembler::from_config(&cfg, batch, action_dim)?;
        let warmup_len = cfg.trim_delta;
        let tracker = TrackerState::new(db, cfg.peak_gap);
        Ok(Self { cfg, ensembler, tracker, q_hat, respawn: None, recoveries: Vec::new(), intervene: true, warmup: warmup_len, t: 0 })
    }

    /// With intervention off the guard only monitors: flags are reported but
    /// never acted on, and the executed actions match a bare ensembler.
    pub fn with_intervention(mut self, on: bool) -> Self {
        self.intervene = on;
        self
    }

    pub fn intervenes(&self) -> bool {
        self.intervene
    }

    pub fn config(&self) -> &GuardConfig {
        &self.cfg
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.tracker
    }

    pub fn ensembler(&self) -> &Ensembler {
        &self.ensembler
    }

    pub fn recoveries(&self) -> &[RecoveryEvent] {
        &self.recoveries
    }

    pub fn is_respawning(&self) -> bool {
        self.respawn.is_some()
    }

    /// Target of the respawn in progress.
    pub fn respawn_action(&self) -> Option<&[f64]> {
        self.respawn.as_ref().map(|r| r.action.as_slice())
    }

    /// Ends the respawn phase early once the system has settled.
    pub fn respawn_reached(&mut self) {
        self.respawn = None;
    }

    /// Processes the policy output of one control step.
    ///
    /// During a respawn the chunk is ignored and the recovery action is held;
    /// slot tracking keeps running. The first `trim_delta` pushes after an
    /// empty ensembler are scored but never flagged, matching the frames that
    /// calibration trims.
    pub fn step(&mut self, chunk: &ActionChunk, feature: &FeatureVector) -> Result<GuardOutput> {
        let t = self.t;
        let sims = cosine_similarities(feature, self.tracker.database())?.to_vec();

        let mut warming = false;
        let (action, tide, respawning) = match self.respawn.as_mut() {
            Some(r) => {
                let action = r.action.clone();
                r.remaining = r.remaining.saturating_sub(1);
                if r.remaining == 0 {
                    self.respawn = None;
                }
                (action, TideScore::INVALID, true)
            }
            None => {
                let (executed, plan) = self.ensembler.push_chunk(chunk)?;
                let tide = compute_tide(&plan, chunk)?;
                warming = self.warmup > 0;
                self.warmup = self.warmup.saturating_sub(1);
                (executed.into_raw_vec_and_offset().0, tide, false)
            }
        };

        let cleared = self.tracker.apply_rollback(&sims, &action, self.cfg.rollback_margin)?;
        self.tracker.update_slots(&sims, &action)?;

        let flagged = !respawning && !warming && is_failing(tide, self.q_hat);
        let mut recovered = false;
        let mut action = action;
        if flagged && self.intervene {
            if let Some(slot) = self.tracker.latest_peaked_slot() {
                let (_, recovery_action) = self.tracker.recover(&mut self.ensembler)?;
                self.warmup = self.cfg.trim_delta;
                let t_star = self.tracker.slots()[slot].t_star;
                log::info!("t = {t}: failure flagged (TIDE {:.3e} > {:.3e}); respawning to slot {}", tide.value, self.q_hat, slot + 1);
                self.recoveries.push(RecoveryEvent { t, slot, t_star, action: recovery_action.clone() });
                self.respawn = (self.cfg.settle_window > 1)
                    .then(|| Respawn { action: recovery_action.clone(), remaining: self.cfg.settle_window - 1 });
                action = recovery_action;
                recovered = true;
            } else {
                log::debug!("t = {t}: failure flagged but no slot has peaked yet");
            }
        }

        self.t += 1;
        Ok(GuardOutput {
            t,
            action,
            tide,
            flagged,
            peaked: self.tracker.slots().iter().map(|s| s.peaked).collect(),
            similarities: sims,
            recovered,
            k_star: self.tracker.latest_peaked_slot(),
            respawning,
            cleared,
        })
    }
}
