use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossBreakdown, TraceLosses};
use super::pgd::{pgd_step, uniform_start};
use super::schedule::{schedule_weights, ScheduleState};
use super::AttackConfig;
use crate::decoding::{generate, generate_on_tape, DecodePolicy, GenerateOptions, GenerationTrace, TapeTrace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor};
use crate::vlm::ToyVlm;

/// Builds the quantity minimized at iteration `t` from that iteration's trace.
pub(super) trait Objective {
    type Record;

    fn build<'t>(
        &mut self,
        t: usize,
        tape: &'t Tape,
        trace: &TapeTrace<'t>,
    ) -> Result<(Tensor<'t>, Self::Record)>;
}

/// Random start followed by `cfg.iters` projected sign-gradient descent
/// steps on `objective`. Returns the final iterate and, per iteration, the
/// objective's record and the ℓ∞ distance after the step.
pub(super) fn pgd_loop<O: Objective>(
    model: &ToyVlm,
    x: &Image,
    cfg: &AttackConfig,
    objective: &mut O,
) -> Result<(Image, Vec<(O::Record, f32)>)> {
    cfg.validate()?;
    model.check_image(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x_t = uniform_start(x, cfg.epsilon, &mut rng);
    let mut records = Vec::with_capacity(cfg.iters);
    let eos = model.vocab.eos_id;
    let mut best: Option<((usize, f64), Image)> = None;
    for t in 1..=cfg.iters {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let pixels = bound.image_input(&x_t, true)?;
        let trace = generate_on_tape(&bound, &pixels, &cfg.iteration_policy(t), GenerateOptions::default())?;
        if cfg.keep_best {
            let score = (trace.len(), -mean_eos_prob(&trace, eos));
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, x_t.clone()));
            }
        }
        let (obj, record) = objective.build(t, &tape, &trace)?;
        let value = obj.item();
        if !value.is_finite() {
            return Err(Error::Attack {
                iteration: t,
                reason: format!("objective is {value}"),
            });
        }
        let grads = obj.backward()?;
        let grad = grads.get_or_zeros(&pixels);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Attack {
                iteration: t,
                reason: "non-finite pixel gradient".into(),
            });
        }
        x_t = pgd_step(&x_t, x, &grad, cfg.alpha, cfg.epsilon);
        records.push((record, x_t.linf_dist(x)));
    }
    Ok((best.map_or(x_t, |(_, b)| b), records))
}

fn mean_eos_prob(trace: &TapeTrace<'_>, eos: usize) -> f64 {
    let sum: f64 = trace.probs.iter().map(|p| p.data()[eos] as f64).sum();
    sum / trace.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub losses: LossBreakdown,
    /// Smoothed weights `λ′(t)`.
    pub lambda: [f64; 3],
    /// ℓ∞ distance to the clean image after this iteration's step.
    pub linf: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub policy: DecodePolicy,
    pub trace: GenerationTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Image,
    pub curve: Vec<IterationRecord>,
    pub evaluations: Vec<PolicyEval>,
    pub linf_dist: f32,
    pub l2_dist: f32,
}

impl AttackResult {
    pub const CURVE_HEADER: &'static str = "iter,L1,L2,L3,lambda1,lambda2,lambda3,N";

    pub fn curve_csv(&self) -> String {
        let mut s = String::from(Self::CURVE_HEADER);
        s.push('\n');
        for r in &self.curve {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iter, l.l1, l.l2, l.l3, r.lambda[0], r.lambda[1], r.lambda[2], l.n
            );
        }
        s
    }

    /// Generated length under the `i`-th evaluation policy.
    pub fn length(&self, i: usize) -> Option<usize> {
        self.evaluations.get(i).map(|e| e.trace.len())
    }
}

struct Verbose<'c> {
    cfg: &'c AttackConfig,
    eos: usize,
    state: ScheduleState,
}

impl Objective for Verbose<'_> {
    type Record = (LossBreakdown, [f64; 3]);

    fn build<'t>(
        &mut self,
        t: usize,
        tape: &'t Tape,
        trace: &TapeTrace<'t>,
    ) -> Result<(Tensor<'t>, Self::Record)> {
        let losses = TraceLosses::compute(tape, trace, self.eos)?;
        let values = losses.breakdown();
        if !values.is_finite() {
            return Err(Error::Attack {
                iteration: t,
                reason: format!("non-finite loss {values:?}"),
            });
        }
        let (lambda, next) = schedule_weights(&self.state, &values, &self.cfg.schedule, self.cfg.momentum);
        self.state = next;
        let mut total: Option<Tensor<'t>> = None;
        for ((term, w), on) in losses.as_array().into_iter().zip(lambda).zip(self.cfg.losses.as_array()) {
            if !on {
                continue;
            }
            let weighted = term.scale(w as f32);
            total = Some(match total {
                Some(acc) => acc.add(&weighted)?,
                None => weighted,
            });
        }
        let total = total.ok_or_else(|| Error::Config("no loss enabled".into()))?;
        Ok((total, (values, lambda)))
    }
}

/// Decodes `x` under every policy.
pub fn evaluate_policies(model: &ToyVlm, x: &Image, policies: &[DecodePolicy]) -> Result<Vec<PolicyEval>> {
    policies
        .iter()
        .map(|p| {
            Ok(PolicyEval {
                policy: *p,
                trace: generate(model, x, p)?,
            })
        })
        .collect()
}

/// Optimizes an ℓ∞-bounded perturbation of `x` that lengthens the
/// generated sequence, using the weighted sum of the enabled losses.
pub fn craft_verbose_image(model: &ToyVlm, x: &Image, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut objective = Verbose {
        cfg,
        eos: model.vocab.eos_id,
        state: ScheduleState::default(),
    };
    let (x_adv, records) = pgd_loop(model, x, cfg, &mut objective)?;
    let curve = records
        .into_iter()
        .enumerate()
        .map(|(i, ((losses, lambda), linf))| IterationRecord {
            iter: i + 1,
            losses,
            lambda,
            linf,
        })
        .collect();
    let evaluations = evaluate_policies(model, &x_adv, &cfg.eval_policies)?;
    Ok(AttackResult {
        linf_dist: x_adv.linf_dist(x),
        l2_dist: x_adv.l2_dist(x),
        x_adv,
        curve,
        evaluations,
    })
}
