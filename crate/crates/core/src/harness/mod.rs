//! Deterministic synthetic environment and scripted policy.
//!
//! A point mass follows a polyline through jittered waypoints. The scripted
//! policy emits action chunks along the path while the state stays inside a
//! basin around it, and heads away from the path otherwise, so disturbances
//! that push the state out of the basin turn into labelled failures.

mod geometry;
mod policy;
mod scenario;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::pool_features;
use crate::ensemble::Ensembler;
use crate::error::{Error, Result};
use crate::tracker::{Guard, RecoveryEvent, TelemetryRow};
use crate::types::{CheckpointAnnotation, EpisodeRecord, Outcome, StepRecord};

pub use geometry::{dist, Point, Polyline, Projection};
pub use policy::{FeatureMap, ScriptedPolicy, APPEARANCE_DIM, CENTER};
pub use scenario::{parse_disturbances, Disturbance, DisturbanceKind, ScenarioConfig, Trigger};

/// Ordered subgoals starting from a fixed initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointTask {
    pub start: Point,
    pub waypoints: Vec<Point>,
    pub subgoal_radius: f64,
}

impl WaypointTask {
    pub fn new(start: Point, waypoints: Vec<Point>, subgoal_radius: f64) -> Result<Self> {
        let task = Self { start, waypoints, subgoal_radius };
        task.path()?;
        Ok(task)
    }

    pub fn num_slots(&self) -> usize {
        self.waypoints.len()
    }

    /// The nominal path: start, then every waypoint in order.
    pub fn path(&self) -> Result<Polyline> {
        if self.waypoints.is_empty() {
            return Err(Error::Config("task needs at least one waypoint".into()));
        }
        let mut pts = vec![self.start];
        pts.extend_from_slice(&self.waypoints);
        Polyline::new(pts).ok_or_else(|| Error::Config("consecutive waypoints coincide".into()))
    }
}

/// Point mass that moves toward a commanded target by at most `max_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub pos: Point,
    pub max_step: f64,
}

impl PointMass {
    pub fn step(&mut self, target: Point) -> Point {
        let d = dist(self.pos, target);
        if d <= self.max_step {
            self.pos = target;
        } else {
            let s = self.max_step / d;
            self.pos = [self.pos[0] + s * (target[0] - self.pos[0]), self.pos[1] + s * (target[1] - self.pos[1])];
        }
        self.pos
    }
}

/// A fully sampled episode, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub id: String,
    pub seed: u64,
    pub index: usize,
    pub task: WaypointTask,
    pub appearance: Vec<f64>,
    pub disturbances: Vec<Disturbance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub record: EpisodeRecord,
    pub task: WaypointTask,
    /// `(waypoint, t)` each time a waypoint is reached in order.
    pub visits: Vec<(usize, usize)>,
    /// `(t, disturbance)` for every disturbance that fired.
    pub fired: Vec<(usize, Disturbance)>,
    /// Empty when no guard was attached.
    pub telemetry: Vec<TelemetryRow>,
    pub recoveries: Vec<RecoveryEvent>,
}

impl EpisodeRun {
    pub fn succeeded(&self) -> bool {
        self.record.outcome == Outcome::Success
    }

    pub fn actions(&self) -> impl Iterator<Item = &[f64]> {
        self.record.steps.iter().map(|s| s.action.as_slice())
    }
}

const STREAM_TASK: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_DISTURB: u64 = 2;

fn stream(seed: u64, index: usize, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 4 + which);
    rng
}

/// Margin kept between a jump landing and the basin or corridor boundary.
const LANDING_MARGIN: f64 = 0.03;
/// Distance at which a respawn target counts as reached.
const RESPAWN_TOLERANCE: f64 = 1e-9;

/// Runs scenario episodes with a fixed scripted policy.
#[derive(Debug, Clone)]
pub struct Harness {
    cfg: ScenarioConfig,
    policy: ScriptedPolicy,
}

impl Harness {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let feature_map = FeatureMap::new(
            cfg.feature_seed,
            cfg.feature_dim,
            cfg.feature_scale,
            cfg.bias_scale,
            cfg.num_tokens,
            cfg.token_spread,
        )?;
        let policy = ScriptedPolicy {
            lipschitz: cfg.lipschitz,
            noise_sigma: cfg.noise_sigma,
            horizon: cfg.guard.chunk_horizon,
            speed: cfg.speed,
            lateral_decay: cfg.lateral_decay,
            basin_radius: cfg.basin_radius,
            confusion_cell: cfg.confusion_cell,
            confusion_spread: cfg.confusion_spread_deg.to_radians(),
            confusion_seed: cfg.feature_seed ^ 0x5EED_C0DE,
            feature_map,
        };
        Ok(Self { cfg, policy })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }

    /// Samples the task and appearance of episode `index` under `seed`.
    pub fn episode_spec(&self, seed: u64, index: usize) -> EpisodeSpec {
        let cfg = &self.cfg;
        let mut rng = stream(seed, index, STREAM_TASK);
        let mut jitter = |p: Point, r: f64| {
            if r > 0.0 {
                [p[0] + rng.gen_range(-r..=r), p[1] + rng.gen_range(-r..=r)]
            } else {
                p
            }
        };
        let start = jitter(cfg.start, cfg.start_jitter);
        let waypoints = cfg.waypoints.iter().map(|&w| jitter(w, cfg.waypoint_jitter)).collect();
        let angle = rng.gen_range(0.0..TAU);
        let appearance = (0..APPEARANCE_DIM)
            .map(|i| {
                let dir = if i == 0 { angle.cos() } else { angle.sin() };
                cfg.appearance_drift * dir + cfg.appearance_jitter * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        EpisodeSpec {
            id: format!("episode_{index:05}"),
            seed,
            index,
            task: WaypointTask { start, waypoints, subgoal_radius: cfg.subgoal_radius },
            appearance,
            disturbances: cfg.disturbances.clone(),
        }
    }

    /// Samples and runs episode `index`.
    pub fn run(&self, seed: u64, index: usize, guard: Option<&mut Guard>) -> Result<EpisodeRun> {
        self.run_episode(&self.episode_spec(seed, index), guard)
    }

    /// Runs `n` unguarded episodes.
    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<EpisodeRun>> {
        (0..n).map(|i| self.run(seed, i, None)).collect()
    }

    fn check_guard(&self, spec: &EpisodeSpec, guard: &Guard) -> Result<()> {
        let k = guard.tracker().num_slots();
        if k != spec.task.num_slots() {
            return Err(Error::Config(format!(
                "database has {k} slots but the task has {} waypoints",
                spec.task.num_slots()
            )));
        }
        let d = guard.tracker().database().feature_dim();
        if d != self.policy.feature_map.dim() {
            return Err(Error::Config(format!(
                "database features have dimension {d}, the encoder produces {}",
                self.policy.feature_map.dim()
            )));
        }
        if guard.config().chunk_horizon != self.policy.horizon {
            return Err(Error::Config(format!(
                "guard chunk horizon {} differs from the policy horizon {}",
                guard.config().chunk_horizon,
                self.policy.horizon
            )));
        }
        Ok(())
    }

    /// One closed-loop rollout: infer, ensemble (or guard), step, check.
    ///
    /// Success means every waypoint was reached in order. Failure means the
    /// state left the corridor or a step budget ran out; the onset is the
    /// first frame of the final stretch spent outside the basin, or the
    /// failing frame when the state was still inside it.
    pub fn run_episode(&self, spec: &EpisodeSpec, mut guard: Option<&mut Guard>) -> Result<EpisodeRun> {
        let cfg = &self.cfg;
        let task = &spec.task;
        let path = task.path()?;
        let k = task.num_slots();
        if let Some(g) = guard.as_deref() {
            self.check_guard(spec, g)?;
        }
        for d in &spec.disturbances {
            let bad = match (d.trigger, d.kind) {
                (Trigger::AfterWaypoint { index, .. }, _) if index >= k => true,
                (_, DisturbanceKind::ObjectReset { to, .. }) => to >= k,
                _ => false,
            };
            if bad {
                return Err(Error::Config(format!("{d}: refers to a waypoint the task lacks")));
            }
        }

        let mut ensembler = Ensembler::from_config(&cfg.guard, 1, 2)?;
        let mut noise = stream(spec.seed, spec.index, STREAM_NOISE);
        let mut drng = stream(spec.seed, spec.index, STREAM_DISTURB);
        let mut env = PointMass { pos: task.start, max_step: cfg.max_step };

        let mut progress = 0;
        let mut last_progress = 0;
        let mut entries: Vec<Option<usize>> = vec![None; k];
        let mut visits = Vec::new();
        let mut pending = 0;
        let mut fired = Vec::new();
        let mut hold = 0usize;
        let mut corruption: Option<(Point, usize)> = None;
        let mut off_since: Option<usize> = None;
        let mut steps = Vec::new();
        let mut telemetry = Vec::new();

        let mut t = 0usize;
        let (outcome, failure_onset) = loop {
            if let Some(d) = spec.disturbances.get(pending) {
                let due = match d.trigger {
                    Trigger::AtStep(s) => t >= s,
                    Trigger::AfterWaypoint { index, delay } => entries[index].is_some_and(|e| t >= e + delay),
                };
                if due {
                    match d.kind {
                        DisturbanceKind::StateJump { magnitude, hold: h } => {
                            env.pos = self.jump_landing(&path, env.pos, magnitude, &mut drng);
                            hold = h;
                        }
                        DisturbanceKind::ObjectReset { to, magnitude } => {
                            env.pos = path.at(path.vertex_arc_length(to + 1) - magnitude);
                            progress = progress.min(to);
                            last_progress = t;
                        }
                        DisturbanceKind::PolicyCorruption { magnitude, steps: n } => {
                            let a = drng.gen_range(0.0..TAU);
                            corruption = (n > 0).then_some(([magnitude * a.cos(), magnitude * a.sin()], n));
                        }
                    }
                    log::debug!("{}: t = {t}: {d}", spec.id);
                    fired.push((t, *d));
                    entries.fill(None);
                    pending += 1;
                }
            }

            let x = env.pos;
            if progress < k && dist(x, task.waypoints[progress]) <= task.subgoal_radius {
                visits.push((progress, t));
                entries[progress] = Some(t);
                progress += 1;
                last_progress = t;
            }

            let (chunk, tokens) =
                self.policy.infer(&path, x, &spec.appearance, corruption.map(|(v, _)| v), &mut noise);
            if let Some((_, n)) = corruption.as_mut() {
                *n -= 1;
                if *n == 0 {
                    corruption = None;
                }
            }
            let feature = pool_features(&tokens)?;
            let action = match guard.as_deref_mut() {
                Some(g) => {
                    let out = g.step(&chunk, &feature)?;
                    telemetry.push(TelemetryRow::from_output(&out, g.q_hat()));
                    out.action
                }
                None => ensembler.push_chunk(&chunk)?.0.into_raw_vec_and_offset().0,
            };
            steps.push(StepRecord { t, state: x.to_vec(), feature, action: action.clone(), chunk });

            let off = path.project(x).distance;
            off_since = if off > cfg.basin_radius { off_since.or(Some(t)) } else { None };
            if progress == k {
                break (Outcome::Success, None);
            }
            if off > cfg.corridor_radius || t - last_progress >= cfg.subgoal_budget || t + 1 >= cfg.step_budget {
                break (Outcome::Failure, Some(off_since.unwrap_or(t)));
            }

            if hold > 0 {
                hold -= 1;
            } else {
                env.step(self.policy.decode(&action));
            }
            if let Some(g) = guard.as_deref_mut() {
                let reached = g.respawn_action().is_some_and(|a| dist(env.pos, self.policy.decode(a)) <= RESPAWN_TOLERANCE);
                if reached {
                    g.respawn_reached();
                }
            }
            t += 1;
        };

        let record = EpisodeRecord { id: spec.id.clone(), steps, outcome, failure_onset };
        Ok(EpisodeRun {
            record,
            task: task.clone(),
            visits,
            fired,
            telemetry,
            recoveries: guard.map(|g| g.recoveries().to_vec()).unwrap_or_default(),
        })
    }

    /// Picks a landing `magnitude` away whose distance to the path lies between
    /// the basin and the corridor, falling back to the candidate closest to
    /// the middle of that band.
    fn jump_landing(&self, path: &Polyline, x: Point, magnitude: f64, rng: &mut ChaCha8Rng) -> Point {
        let (lo, hi) = (self.cfg.basin_radius + LANDING_MARGIN, self.cfg.corridor_radius - LANDING_MARGIN);
        let mid = 0.5 * (self.cfg.basin_radius + self.cfg.corridor_radius);
        let mut best = (f64::INFINITY, x);
        for _ in 0..64 {
            let a = rng.gen_range(0.0..TAU);
            let land = [x[0] + magnitude * a.cos(), x[1] + magnitude * a.sin()];
            let d = path.project(land).distance;
            if (lo..=hi).contains(&d) {
                return land;
            }
            if (d - mid).abs() < best.0 {
                best = ((d - mid).abs(), land);
            }
        }
        best.1
    }
}

/// Ground-truth checkpoint labels: for each waypoint in order, the first frame
/// within the subgoal radius, searched after the previous waypoint's frame.
pub fn scripted_annotations(task: &WaypointTask, episode: &EpisodeRecord) -> Result<CheckpointAnnotation> {
    let mut stamps = Vec::with_capacity(task.num_slots());
    let mut from = 0;
    for (k, w) in task.waypoints.iter().enumerate() {
        let hit = episode.steps[from..]
            .iter()
            .position(|s| s.state.len() >= 2 && dist([s.state[0], s.state[1]], *w) <= task.subgoal_radius)
            .ok_or_else(|| Error::Protocol(format!("episode {} never reaches waypoint {k}", episode.id)))?;
        stamps.push(episode.steps[from + hit].t);
        from += hit + 1;
    }
    Ok(CheckpointAnnotation { episode_id: episode.id.clone(), slot_timestamps: stamps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> ScenarioConfig {
        ScenarioConfig { noise_sigma: 0.0, ..ScenarioConfig::default() }
    }

    #[test]
    fn point_mass_bounds_the_step() {
        let mut env = PointMass { pos: [0.0, 0.0], max_step: 0.1 };
        assert_eq!(env.step([0.0, 0.0]), [0.0, 0.0]);
        let p = env.step([3.0, 4.0]);
        assert!((p[0] - 0.06).abs() < 1e-15 && (p[1] - 0.08).abs() < 1e-15);
        assert_eq!(env.step([0.1, 0.1]), [0.1, 0.1]);
    }

    #[test]
    fn nominal_episode_succeeds_and_annotates() {
        let h = Harness::new(ScenarioConfig::default()).unwrap();
        let run = h.run(11, 0, None).unwrap();
        assert!(run.succeeded(), "{:?}", run.record.outcome);
        run.record.validate().unwrap();
        let ann = scripted_annotations(&run.task, &run.record).unwrap();
        assert_eq!(ann.slot_timestamps.len(), 3);
        assert!(ann.slot_timestamps.windows(2).all(|w| w[0] < w[1]));
        let visit_times: Vec<usize> = run.visits.iter().map(|v| v.1).collect();
        assert_eq!(ann.slot_timestamps, visit_times);
    }

    #[test]
    fn deterministic_given_seed() {
        let h = Harness::new(ScenarioConfig::default()).unwrap();
        assert_eq!(h.run(5, 3, None).unwrap(), h.run(5, 3, None).unwrap());
        assert_ne!(h.run(5, 3, None).unwrap().record, h.run(6, 3, None).unwrap().record);
    }

    #[test]
    fn state_jump_fails_without_guard() {
        let mut cfg = quiet();
        cfg.disturbances = parse_disturbances("state_jump@wp0+30,mag=0.5").unwrap();
        let h = Harness::new(cfg).unwrap();
        for i in 0..5 {
            let run = h.run(2, i, None).unwrap();
            assert_eq!(run.fired.len(), 1);
            assert_eq!(run.record.outcome, Outcome::Failure);
            assert_eq!(run.record.failure_onset, Some(run.fired[0].0));
        }
    }

    #[test]
    fn object_reset_rewinds_progress() {
        let mut cfg = quiet();
        cfg.disturbances = parse_disturbances("object_reset@wp1+5,to=0,mag=0.02").unwrap();
        let h = Harness::new(cfg).unwrap();
        let run = h.run(1, 0, None).unwrap();
        let wp0: Vec<usize> = run.visits.iter().filter(|v| v.0 == 0).map(|v| v.1).collect();
        assert_eq!(wp0.len(), 2);
        assert_eq!(wp0[1], run.fired[0].0);
    }

    #[test]
    fn annotation_requires_every_waypoint() {
        let mut cfg = quiet();
        cfg.disturbances = parse_disturbances("state_jump@t=5").unwrap();
        let h = Harness::new(cfg).unwrap();
        let run = h.run(0, 0, None).unwrap();
        assert!(scripted_annotations(&run.task, &run.record).is_err());
    }
}
