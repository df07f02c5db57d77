//! Noise schedules: precomputed `beta_t`, `alpha_t`, `alpha_bar_t` tables
//! over the diffusion steps `t = 1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// The terminal signal mass allowed when a schedule is built from a run
/// config: `alpha_bar[T] < 0.01` keeps `x_T` indistinguishable from
/// standard Gaussian noise.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Schedule parameters as they appear in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // DDPM convention: linear 1e-4 -> 0.02 over 1000 steps.
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    /// Build the schedule and additionally require the terminal-noise
    /// invariant `alpha_bar[T] < 0.01`. Use this for configured runs;
    /// [`NoiseSchedule::linear`] alone does not enforce the terminal bound
    /// (short test schedules legitimately violate it).
    pub fn build(&self) -> Result<NoiseSchedule> {
        let schedule = match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?,
        };
        let terminal = schedule.terminal_alpha_bar();
        if terminal >= MAX_TERMINAL_ALPHA_BAR {
            return Err(EngineError::Config(format!(
                "schedule keeps too much signal at t=T: alpha_bar[T] = {terminal:.6} >= {MAX_TERMINAL_ALPHA_BAR}; \
                 raise steps or the beta range"
            )));
        }
        Ok(schedule)
    }
}

/// Precomputed noise schedule. Tables are indexed by step `t` in `1..=T`
/// through the accessors; construction guarantees `0 < beta_t < 1` and a
/// strictly decreasing `alpha_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of beta from `beta_start` at t=1 to `beta_end`
    /// at t=T.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(EngineError::Config("schedule needs at least 1 step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(EngineError::Config(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                })
                .collect()
        };
        Self::from_betas(beta)
    }

    /// Build from explicit per-step betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(EngineError::Config("schedule needs at least 1 step".into()));
        }
        if let Some(&bad) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(EngineError::Config(format!(
                "every beta must lie in (0,1), got {bad}"
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut product = 1.0;
        for &a in &alpha {
            product *= a;
            alpha_bar.push(product);
        }
        // beta in (0,1) forces alpha in (0,1), so the cumulative product is
        // strictly decreasing; check anyway to catch underflow pathologies.
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(EngineError::Config(
                    "alpha_bar must be strictly decreasing".into(),
                ));
            }
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(EngineError::StepOutOfRange {
                t,
                t_max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bar.last().expect("schedule is never empty")
    }
}
