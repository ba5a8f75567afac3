//! Verbose-image crafting: length-inducing losses, the weight schedule,
//! the projected sign-gradient loop and the baseline attacks.

mod baselines;
mod losses;
mod pgd;
mod schedule;
mod verbose;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{baseline_nicg, baseline_noise, baseline_sponge, nicg_attack, sponge_attack, BaselineRun};
pub use losses::{loss_diversity, loss_eos, loss_uncertainty, LossBreakdown, TraceLosses};
pub use pgd::{pgd_step, project, sign, uniform_start};
pub use schedule::{schedule_weights, Schedule, ScheduleState, DECAY_FLOOR, WEIGHT_DELTA};
pub use verbose::{craft_verbose_image, evaluate_policies, AttackResult, IterationRecord, PolicyEval};

use crate::decoding::{DecodePolicy, EVAL_MAX_LEN};
use crate::error::{Error, Result};

/// Which of the three losses enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSet {
    pub eos: bool,
    pub uncertainty: bool,
    pub diversity: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        eos: true,
        uncertainty: true,
        diversity: true,
    };

    pub fn as_array(&self) -> [bool; 3] {
        [self.eos, self.uncertainty, self.diversity]
    }

    pub fn from_array(a: [bool; 3]) -> Self {
        Self {
            eos: a[0],
            uncertainty: a[1],
            diversity: a[2],
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.eos || self.uncertainty || self.diversity)
    }

    /// The seven non-empty combinations, singles first.
    pub fn combinations() -> Vec<LossSet> {
        [
            [true, false, false],
            [false, true, false],
            [false, false, true],
            [true, true, false],
            [true, false, true],
            [false, true, true],
            [true, true, true],
        ]
        .into_iter()
        .map(Self::from_array)
        .collect()
    }
}

impl Default for LossSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// `L1+L2+L3` style names.
impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = ["L1", "L2", "L3"]
            .into_iter()
            .zip(self.as_array())
            .filter_map(|(n, on)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = [false; 3];
        for part in s.split('+') {
            let j = match part.trim() {
                "L1" | "l1" | "eos" => 0,
                "L2" | "l2" | "uncertainty" => 1,
                "L3" | "l3" | "diversity" => 2,
                _ => return Err(Error::Config(format!("invalid loss set {s:?}"))),
            };
            set[j] = true;
        }
        Ok(Self::from_array(set))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ budget in the `[0, 1]` pixel domain.
    pub epsilon: f32,
    /// Step size in the `[0, 1]` pixel domain.
    pub alpha: f32,
    pub iters: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    /// Maximum number of decoder steps unrolled per iteration.
    pub unroll_cap: usize,
    /// Decoding used to produce the trace each iteration.
    pub attack_policy: DecodePolicy,
    pub losses: LossSet,
    /// Seeds the random start (and sampled attack-time decoding).
    pub seed: u64,
    /// Policies the final image is evaluated under.
    pub eval_policies: Vec<DecodePolicy>,
    /// Return the iterate with the longest attack-time trace (ties go to
    /// the lower mean EOS probability) instead of the last iterate.
    pub keep_best: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let unroll_cap = 64;
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 1.0 / 255.0,
            iters: 300,
            schedule: Schedule::default(),
            momentum: 0.9,
            unroll_cap,
            attack_policy: DecodePolicy::greedy(unroll_cap),
            losses: LossSet::ALL,
            seed: 0,
            eval_policies: vec![DecodePolicy::greedy(EVAL_MAX_LEN)],
            keep_best: false,
        }
    }
}

impl AttackConfig {
    /// Checks the budget, step, iteration and momentum constraints. A zero
    /// budget is accepted as the null attack.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return bad(format!("alpha {} exceeds epsilon {}", self.alpha, self.epsilon));
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.unroll_cap == 0 {
            return bad("unroll_cap must be >= 1".into());
        }
        if self.losses.is_empty() {
            return bad("at least one loss must be enabled".into());
        }
        if !self.schedule.a.iter().chain(&self.schedule.b).all(|v| v.is_finite()) {
            return bad("schedule coefficients must be finite".into());
        }
        self.attack_policy.validate()?;
        for p in &self.eval_policies {
            p.validate()?;
        }
        Ok(())
    }

    /// Attack-time decoding policy for iteration `t`.
    pub(crate) fn iteration_policy(&self, t: usize) -> DecodePolicy {
        let p = self.attack_policy.with_max_len(self.unroll_cap);
        if p.is_stochastic() {
            p.with_seed(p.seed ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t as u64)
        } else {
            p
        }
    }
}
