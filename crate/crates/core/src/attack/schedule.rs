//! Temporal loss-weight adjustment with momentum.
//!
//! `λⱼ(t) = |L₂| / max(|Lⱼ|, δ) / max(aⱼ·ln t + bⱼ, τ_min)` followed by
//! `λ′ⱼ(t) = m·λ′ⱼ(t−1) + (1−m)·λⱼ(t)`, with `λ′ⱼ(1) = λⱼ(1)`.

use serde::{Deserialize, Serialize};

use super::losses::LossBreakdown;

/// Guard on the loss magnitude in the normalization denominator.
pub const WEIGHT_DELTA: f64 = 1e-8;
/// Floor applied to the decay term.
pub const DECAY_FLOOR: f64 = 1.0;

/// Decay coefficients `(aⱼ, bⱼ)` for the three losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            a: [10.0, 0.0, 0.5],
            b: [-20.0, 0.0, 1.0],
        }
    }
}

impl Schedule {
    /// Normalization only: every decay term is the constant 1.
    pub fn no_decay() -> Self {
        Self {
            a: [0.0; 3],
            b: [1.0; 3],
        }
    }

    /// `max(a·ln t + b, τ_min)`
    pub fn decay(&self, j: usize, t: usize) -> f64 {
        (self.a[j] * (t as f64).ln() + self.b[j]).max(DECAY_FLOOR)
    }

    /// Unsmoothed weights at iteration `t ≥ 1`.
    pub fn raw_weights(&self, losses: &LossBreakdown, t: usize) -> [f64; 3] {
        let l = losses.as_array();
        let num = (l[1] as f64).abs();
        std::array::from_fn(|j| num / (l[j] as f64).abs().max(WEIGHT_DELTA) / self.decay(j, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// `λ′(t−1)`; meaningless while `t == 1`.
    pub lambda_prev: [f64; 3],
    /// Iteration the next update computes.
    pub t: usize,
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self {
            lambda_prev: [0.0; 3],
            t: 1,
        }
    }
}

/// Computes `λ′(t)` and the state for `t + 1`.
pub fn schedule_weights(
    state: &ScheduleState,
    losses: &LossBreakdown,
    schedule: &Schedule,
    momentum: f64,
) -> ([f64; 3], ScheduleState) {
    let t = state.t.max(1);
    let raw = schedule.raw_weights(losses, t);
    let smoothed = if t == 1 {
        raw
    } else {
        std::array::from_fn(|j| momentum * state.lambda_prev[j] + (1.0 - momentum) * raw[j])
    };
    (
        smoothed,
        ScheduleState {
            lambda_prev: smoothed,
            t: t + 1,
        },
    )
}
