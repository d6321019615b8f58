//! Temporal ensembling of overlapping action chunks.
//!
//! Each pending timestep keeps a running weighted sum of every prediction
//! that targets it. Weights are `exp(-m * age)` with the newest chunk at age
//! zero; aging the whole buffer by `exp(-m)` on every push keeps the sums in
//! that form without revisiting stored chunks.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{ActionChunk, AggregatedPlan, GuardConfig};

#[derive(Debug, Clone)]
struct PendingStep {
    weighted_sum: Array2<f64>,
    weight: f64,
}

impl PendingStep {
    fn empty(batch: usize, action_dim: usize) -> Self {
        Self { weighted_sum: Array2::zeros((batch, action_dim)), weight: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Ensembler {
    batch: usize,
    horizon: usize,
    action_dim: usize,
    overlap: usize,
    decay: f64,
    m: f64,
    /// `buffer[i]` accumulates predictions for `current_time + i`.
    buffer: VecDeque<PendingStep>,
    current_time: usize,
}

impl Ensembler {
    pub fn new(batch: usize, horizon: usize, action_dim: usize, overlap: usize, m: f64) -> Result<Self> {
        if batch == 0 || horizon == 0 || action_dim == 0 {
            return Err(Error::Config(format!(
                "ensembler needs non-empty shape, got ({batch}, {horizon}, {action_dim})"
            )));
        }
        if overlap == 0 || overlap > horizon {
            return Err(Error::Config(format!("overlap must lie in 1..={horizon}, got {overlap}")));
        }
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Config(format!("ensemble coefficient must be > 0, got {m}")));
        }
        let buffer = (0..horizon).map(|_| PendingStep::empty(batch, action_dim)).collect();
        Ok(Self {
            batch,
            horizon,
            action_dim,
            overlap,
            decay: (-m).exp(),
            m,
            buffer,
            current_time: 0,
        })
    }

    pub fn from_config(cfg: &GuardConfig, batch: usize, action_dim: usize) -> Result<Self> {
        Self::new(batch, cfg.chunk_horizon, action_dim, cfg.overlap, cfg.ensemble_m)
    }

    pub fn current_time(&self) -> usize {
        self.current_time
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn coefficient(&self) -> f64 {
        self.m
    }

    /// True when no prediction is pending.
    pub fn is_empty(&self) -> bool {
        self.buffer.iter().all(|p| p.weight == 0.0)
    }

    /// Snapshot of the aggregate over the next `overlap` steps.
    pub fn plan(&self) -> AggregatedPlan {
        let mut values = Array3::zeros((self.batch, self.overlap, self.action_dim));
        let mut weights = Array1::zeros(self.overlap);
        for (tau, pending) in self.buffer.iter().take(self.overlap).enumerate() {
            if pending.weight > 0.0 {
                values
                    .slice_mut(s![.., tau, ..])
                    .assign(&(&pending.weighted_sum / pending.weight));
                weights[tau] = pending.weight;
            }
        }
        AggregatedPlan::new(values, weights, self.current_time)
            .expect("ensembler plans are well-formed by construction")
    }

    /// Merges a chunk predicted at the current time and advances one step.
    ///
    /// Returns the executed action `(batch, action_dim)` and the plan as it
    /// stood before this chunk was merged.
    pub fn push_chunk(&mut self, chunk: &ActionChunk) -> Result<(Array2<f64>, AggregatedPlan)> {
        let (b, h, d) = chunk.values().dim();
        if (b, h, d) != (self.batch, self.horizon, self.action_dim) {
            return Err(Error::Dimension(format!(
                "chunk shape ({b}, {h}, {d}) does not match ensembler ({}, {}, {})",
                self.batch, self.horizon, self.action_dim
            )));
        }
        let plan = self.plan();

        let values = chunk.values();
        for (tau, pending) in self.buffer.iter_mut().enumerate() {
            if pending.weight > 0.0 {
                pending.weighted_sum *= self.decay;
                pending.weight *= self.decay;
            }
            pending.weighted_sum += &values.slice(s![.., tau, ..]);
            pending.weight += 1.0;
        }

        let head = self.buffer.pop_front().expect("buffer holds `horizon` steps");
        self.buffer.push_back(PendingStep::empty(self.batch, self.action_dim));
        self.current_time += 1;
        Ok((head.weighted_sum / head.weight, plan))
    }

    /// Drops every pending prediction; the clock keeps running.
    pub fn reset(&mut self) {
        for pending in &mut self.buffer {
            *pending = PendingStep::empty(self.batch, self.action_dim);
        }
    }
}
