//! Temporal inter-chunk discrepancy: the mean squared gap between the
//! ensembled plan from the previous step and the fresh chunk, over their
//! aligned overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActionChunk, AggregatedPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TideScore {
    pub value: f64,
    /// False when the plan carried no prior prediction.
    pub valid: bool,
}

impl TideScore {
    pub const INVALID: TideScore = TideScore { value: 0.0, valid: false };
}

/// Mean squared discrepancy over the valid plan steps.
///
/// Steps of the plan with zero weight are skipped and the divisor counts only
/// the cells that were compared.
pub fn compute_tide(plan: &AggregatedPlan, fresh: &ActionChunk) -> Result<TideScore> {
    if plan.batch() != fresh.batch() || plan.action_dim() != fresh.action_dim() {
        return Err(Error::Dimension(format!(
            "plan (B={}, D={}) and chunk (B={}, D={}) disagree",
            plan.batch(),
            plan.action_dim(),
            fresh.batch(),
            fresh.action_dim()
        )));
    }
    if fresh.horizon() < plan.overlap() {
        return Err(Error::Dimension(format!(
            "chunk horizon {} shorter than overlap {}",
            fresh.horizon(),
            plan.overlap()
        )));
    }
    let planned = plan.values();
    let chunk = fresh.values();
    let mut sum = 0.0;
    let mut steps = 0usize;
    for tau in (0..plan.overlap()).filter(|&tau| plan.is_valid_step(tau)) {
        steps += 1;
        for b in 0..plan.batch() {
            for d in 0..plan.action_dim() {
                let diff = planned[[b, tau, d]] - chunk[[b, tau, d]];
                sum += diff * diff;
            }
        }
    }
    if steps == 0 {
        return Ok(TideScore::INVALID);
    }
    let cells = (steps * plan.batch() * plan.action_dim()) as f64;
    Ok(TideScore { value: sum / cells, valid: true })
}

/// Failure flag: strictly above the threshold, and only for valid scores.
pub fn is_failing(score: TideScore, q_hat: f64) -> bool {
    score.valid && score.value > q_hat
}
