//! Reference attacks: uniform noise, activation-energy maximization, and
//! logit suppression of EOS and the current tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgd::uniform_start;
use super::verbose::{pgd_loop, Objective};
use super::AttackConfig;
use crate::decoding::TapeTrace;
use crate::error::Result;
use crate::image::Image;
use crate::tensor::{Tape, Tensor};
use crate::vlm::ToyVlm;

/// Outcome of a baseline attack with its per-iteration objective value
/// (the quantity the attack increases).
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub x_adv: Image,
    pub objective: Vec<f32>,
    /// ℓ∞ distance to the clean image after each step.
    pub linf: Vec<f32>,
}

/// `x + U(−ε, ε)`, clamped to `[0, 1]`.
pub fn baseline_noise(x: &Image, epsilon: f32, seed: u64) -> Image {
    uniform_start(x, epsilon, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sum_of_squares<'t>(tensors: impl IntoIterator<Item = Tensor<'t>>) -> Result<Option<Tensor<'t>>> {
    let mut acc: Option<Tensor<'t>> = None;
    for a in tensors {
        let e = a.mul(&a)?.sum();
        acc = Some(match acc {
            Some(s) => s.add(&e)?,
            None => e,
        });
    }
    Ok(acc)
}

struct Sponge;

impl Objective for Sponge {
    type Record = f32;

    fn build<'t>(&mut self, _t: usize, tape: &'t Tape, trace: &TapeTrace<'t>) -> Result<(Tensor<'t>, f32)> {
        let acts = trace
            .encoder_activations
            .iter()
            .chain(&trace.hiddens)
            .copied();
        let energy = sum_of_squares(acts)?.unwrap_or(tape.scalar(0.0));
        Ok((energy.neg(), energy.item()))
    }
}

struct Nicg {
    eos: usize,
}

impl Objective for Nicg {
    type Record = f32;

    fn build<'t>(&mut self, _t: usize, tape: &'t Tape, trace: &TapeTrace<'t>) -> Result<(Tensor<'t>, f32)> {
        let logits = trace.stacked_logits(tape)?;
        let v = logits.shape()[1];
        let idx: Vec<usize> = trace
            .tokens
            .iter()
            .enumerate()
            .flat_map(|(i, &y)| [i * v + self.eos, i * v + y])
            .collect();
        let n = idx.len();
        let total = logits.gather(idx.into(), &[n])?.sum();
        Ok((total, -total.item()))
    }
}

fn into_run(x_adv: Image, records: Vec<(f32, f32)>) -> BaselineRun {
    let (objective, linf) = records.into_iter().unzip();
    BaselineRun { x_adv, objective, linf }
}

/// PGD maximizing the summed squared activations of the encoder layers and
/// every decoder hidden state.
pub fn sponge_attack(model: &ToyVlm, x: &Image, cfg: &AttackConfig) -> Result<BaselineRun> {
    let (x_adv, records) = pgd_loop(model, x, cfg, &mut Sponge)?;
    Ok(into_run(x_adv, records))
}

/// PGD minimizing `Σᵢ zᵢ[eos] + zᵢ[yᵢ]` over the pre-softmax logits of the
/// tokens generated at each iteration. The recorded objective is the
/// negated sum.
pub fn nicg_attack(model: &ToyVlm, x: &Image, cfg: &AttackConfig) -> Result<BaselineRun> {
    let mut obj = Nicg {
        eos: model.vocab.eos_id,
    };
    let (x_adv, records) = pgd_loop(model, x, cfg, &mut obj)?;
    Ok(into_run(x_adv, records))
}

pub fn baseline_sponge(model: &ToyVlm, x: &Image, cfg: &AttackConfig) -> Result<Image> {
    Ok(sponge_attack(model, x, cfg)?.x_adv)
}

pub fn baseline_nicg(model: &ToyVlm, x: &Image, cfg: &AttackConfig) -> Result<Image> {
    Ok(nicg_attack(model, x, cfg)?.x_adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::DecodePolicy;
    use crate::vlm::synth_dataset;

    fn cfg(epsilon: f32) -> AttackConfig {
        AttackConfig {
            epsilon,
            iters: 4,
            unroll_cap: 6,
            eval_policies: vec![DecodePolicy::greedy(8)],
            ..Default::default()
        }
    }

    #[test]
    fn noise_zero_budget_and_bound() {
        let x = synth_dataset(1, 0, &crate::vlm::Vocab::standard()).remove(0).image;
        assert_eq!(baseline_noise(&x, 0.0, 3), x);
        let eps = 8.0 / 255.0;
        let n = baseline_noise(&x, eps, 3);
        assert!(n.linf_dist(&x) <= eps + 1e-7);
        assert!(n.in_unit_range());
        assert_ne!(n, x);
        assert_eq!(n, baseline_noise(&x, eps, 3));
    }

    #[test]
    fn zero_budget_baselines_are_identity() {
        let m = ToyVlm::standard(3);
        let x = synth_dataset(1, 1, &m.vocab).remove(0).image;
        assert_eq!(baseline_sponge(&m, &x, &cfg(0.0)).unwrap(), x);
        assert_eq!(baseline_nicg(&m, &x, &cfg(0.0)).unwrap(), x);
    }

    #[test]
    fn baselines_stay_in_budget() {
        let m = ToyVlm::standard(3);
        let x = synth_dataset(1, 2, &m.vocab).remove(0).image;
        let c = cfg(4.0 / 255.0);
        for run in [sponge_attack(&m, &x, &c).unwrap(), nicg_attack(&m, &x, &c).unwrap()] {
            assert_eq!(run.objective.len(), 4);
            assert!(run.objective.iter().all(|v| v.is_finite()));
            assert!(run.linf.iter().all(|&d| d <= c.epsilon + 1e-7));
            assert!(run.x_adv.in_unit_range());
        }
    }
}
