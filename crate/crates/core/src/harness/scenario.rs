use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::{read_json, write_json};
use crate::types::GuardConfig;

use super::geometry::{dist, Point};

/// When a disturbance fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// At a fixed control step.
    AtStep(usize),
    /// `delay` steps after waypoint `index` (zero-based) was entered,
    /// counting only entries since the previous disturbance fired.
    AfterWaypoint { index: usize, delay: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Pushes the state `magnitude` away from the nominal path and holds it
    /// there for `hold` steps.
    StateJump { magnitude: f64, hold: usize },
    /// Moves the scene back to just before waypoint `to` and undoes task
    /// progress from there; `magnitude` is the arc-length backoff.
    ObjectReset { to: usize, magnitude: f64 },
    /// Offsets every predicted target by `magnitude` for `steps` steps.
    PolicyCorruption { magnitude: f64, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    #[serde(flatten)]
    pub kind: DisturbanceKind,
    pub trigger: Trigger,
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            DisturbanceKind::StateJump { .. } => "state_jump",
            DisturbanceKind::ObjectReset { .. } => "object_reset",
            DisturbanceKind::PolicyCorruption { .. } => "policy_corruption",
        };
        write!(f, "{name}@")?;
        match self.trigger {
            Trigger::AtStep(t) => write!(f, "t={t}")?,
            Trigger::AfterWaypoint { index, delay } => write!(f, "wp{index}+{delay}")?,
        }
        match self.kind {
            DisturbanceKind::StateJump { magnitude, hold } => write!(f, ",mag={magnitude},hold={hold}"),
            DisturbanceKind::ObjectReset { to, magnitude } => write!(f, ",to={to},mag={magnitude}"),
            DisturbanceKind::PolicyCorruption { magnitude, steps } => write!(f, ",mag={magnitude},steps={steps}"),
        }
    }
}

/// Parses `kind@trigger[,key=value]*`, e.g. `state_jump@wp0+30,mag=0.5`.
///
/// Triggers are `t=<step>` or `wp<index>+<delay>`.
impl FromStr for Disturbance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("disturbance `{s}`: {msg}"));
        let (kind, rest) = s.trim().split_once('@').ok_or_else(|| bad("missing `@trigger`"))?;
        let mut parts = rest.split(',');
        let trig = parts.next().unwrap_or("").trim();
        let trigger = if let Some(t) = trig.strip_prefix("t=") {
            Trigger::AtStep(t.parse().map_err(|_| bad("bad step"))?)
        } else if let Some(w) = trig.strip_prefix("wp") {
            let (i, d) = w.split_once('+').unwrap_or((w, "0"));
            Trigger::AfterWaypoint {
                index: i.parse().map_err(|_| bad("bad waypoint index"))?,
                delay: d.parse().map_err(|_| bad("bad delay"))?,
            }
        } else {
            return Err(bad("trigger must be `t=<step>` or `wp<i>+<delay>`"));
        };

        let (mut mag, mut to, mut steps, mut hold) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k.trim() {
                "mag" => mag = Some(v.trim().parse::<f64>().map_err(|_| bad("bad mag"))?),
                "to" => to = Some(v.trim().parse::<usize>().map_err(|_| bad("bad to"))?),
                "steps" => steps = Some(v.trim().parse::<usize>().map_err(|_| bad("bad steps"))?),
                "hold" => hold = Some(v.trim().parse::<usize>().map_err(|_| bad("bad hold"))?),
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        let kind = match kind.trim() {
            "state_jump" => DisturbanceKind::StateJump { magnitude: mag.unwrap_or(0.5), hold: hold.unwrap_or(12) },
            "object_reset" => DisturbanceKind::ObjectReset {
                to: to.ok_or_else(|| bad("object_reset needs `to`"))?,
                magnitude: mag.unwrap_or(0.03),
            },
            "policy_corruption" => DisturbanceKind::PolicyCorruption {
                magnitude: mag.unwrap_or(0.3),
                steps: steps.unwrap_or(10),
            },
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        Ok(Disturbance { kind, trigger })
    }
}

/// Parses a `;`-separated list of disturbances. Empty input gives none.
pub fn parse_disturbances(spec: &str) -> Result<Vec<Disturbance>> {
    spec.split(';').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

/// Everything that defines a family of harness episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub start: Point,
    pub waypoints: Vec<Point>,
    pub subgoal_radius: f64,
    /// Per-episode uniform jitter on each waypoint coordinate.
    pub waypoint_jitter: f64,
    pub start_jitter: f64,
    /// Nominal arc length advanced per step.
    pub speed: f64,
    /// Largest displacement the point mass makes in one step.
    pub max_step: f64,
    /// Distance from the path within which the policy still tracks it.
    pub basin_radius: f64,
    /// Leaving this distance from the path is a failure.
    pub corridor_radius: f64,
    pub lipschitz: f64,
    pub noise_sigma: f64,
    /// Geometric pull-back of a lateral offset per predicted step.
    pub lateral_decay: f64,
    /// Cell size over which the off-path policy keeps one heading.
    pub confusion_cell: f64,
    /// Half-width of the off-path heading spread, in degrees.
    pub confusion_spread_deg: f64,
    pub feature_dim: usize,
    pub feature_scale: f64,
    pub bias_scale: f64,
    pub num_tokens: usize,
    pub token_spread: f64,
    pub feature_seed: u64,
    /// Length of the per-episode appearance shift seen by the encoder.
    pub appearance_drift: f64,
    pub appearance_jitter: f64,
    pub subgoal_budget: usize,
    pub step_budget: usize,
    pub disturbances: Vec<Disturbance>,
    pub guard: GuardConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            start: [0.15, 0.2],
            waypoints: vec![[0.45, 0.3], [0.75, 0.45], [0.6, 0.8]],
            subgoal_radius: 0.05,
            waypoint_jitter: 0.02,
            start_jitter: 0.02,
            speed: 0.01,
            max_step: 0.1,
            basin_radius: 0.15,
            corridor_radius: 0.35,
            lipschitz: 2.0,
            noise_sigma: 0.01,
            lateral_decay: 0.8,
            confusion_cell: 0.05,
            confusion_spread_deg: 45.0,
            feature_dim: 64,
            feature_scale: 3.0,
            bias_scale: 1.0,
            num_tokens: 4,
            token_spread: 0.1,
            feature_seed: 7,
            appearance_drift: 0.0,
            appearance_jitter: 0.02,
            subgoal_budget: 200,
            step_budget: 500,
            disturbances: Vec::new(),
            guard: GuardConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(format!("scenario config: {e}")),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn num_waypoints(&self) -> usize {
        self.waypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.waypoints.is_empty() {
            return cfg("scenario needs at least one waypoint".into());
        }
        let mut prev = self.start;
        for (i, &w) in self.waypoints.iter().enumerate() {
            if !w.iter().all(|v| (0.0..=1.0).contains(v)) {
                return cfg(format!("waypoint {i} lies outside the unit box"));
            }
            if dist(prev, w) <= 2.0 * (self.waypoint_jitter + self.start_jitter) + 1e-9 {
                return cfg(format!("waypoint {i} coincides with its predecessor"));
            }
            prev = w;
        }
        let positive = [
            ("subgoal_radius", self.subgoal_radius),
            ("speed", self.speed),
            ("max_step", self.max_step),
            ("basin_radius", self.basin_radius),
            ("lipschitz", self.lipschitz),
            ("confusion_cell", self.confusion_cell),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("waypoint_jitter", self.waypoint_jitter),
            ("start_jitter", self.start_jitter),
            ("noise_sigma", self.noise_sigma),
            ("feature_scale", self.feature_scale),
            ("bias_scale", self.bias_scale),
            ("token_spread", self.token_spread),
            ("appearance_drift", self.appearance_drift),
            ("appearance_jitter", self.appearance_jitter),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.corridor_radius <= self.basin_radius {
            return cfg("corridor_radius must exceed basin_radius".into());
        }
        if !(0.0..1.0).contains(&self.lateral_decay) {
            return cfg("lateral_decay must lie in [0, 1)".into());
        }
        if self.feature_dim == 0 || self.num_tokens == 0 {
            return cfg("feature_dim and num_tokens must be positive".into());
        }
        if self.step_budget == 0 || self.subgoal_budget == 0 {
            return cfg("budgets must be positive".into());
        }
        self.guard.validate()?;
        if let Some(k) = self.guard.num_slots {
            if k != self.waypoints.len() {
                return cfg(format!("guard.num_slots = {k} but the scenario has {} waypoints", self.waypoints.len()));
            }
        }
        for d in &self.disturbances {
            if let Trigger::AfterWaypoint { index, .. } = d.trigger {
                if index >= self.waypoints.len() {
                    return cfg(format!("{d}: no waypoint {index}"));
                }
            }
            match d.kind {
                DisturbanceKind::ObjectReset { to, magnitude } => {
                    if to >= self.waypoints.len() || !(magnitude >= 0.0) {
                        return cfg(format!("{d}: bad object_reset target"));
                    }
                }
                DisturbanceKind::StateJump { magnitude, .. } | DisturbanceKind::PolicyCorruption { magnitude, .. } => {
                    if !(magnitude >= 0.0 && magnitude.is_finite()) {
                        return cfg(format!("{d}: magnitude must be non-negative"));
                    }
                }
            }
        }
        Ok(())
    }
}
