//! The three length-inducing objectives, evaluated on a recorded trace.

use serde::{Deserialize, Serialize};

use crate::decoding::TapeTrace;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Mean EOS probability over all positions of an `N×V` distribution matrix.
pub fn loss_eos<'t>(probs: &Tensor<'t>, eos: usize) -> Result<Tensor<'t>> {
    let shape = probs.shape();
    let (n, v) = match shape.as_slice() {
        &[n, v] if n >= 1 => (n, v),
        _ => return Err(Error::Usage(format!("loss_eos needs an N×V matrix with N ≥ 1, got {shape:?}"))),
    };
    if eos >= v {
        return Err(Error::dim("loss_eos", format!("eos {eos} >= vocab {v}")));
    }
    let idx: Vec<usize> = (0..n).map(|i| i * v + eos).collect();
    Ok(probs.gather(idx.into(), &[n])?.mean())
}

/// `Σᵢ KL(fᵢ ‖ uniform) = Σᵢ Σ_v f log f + N log V`, with `0 log 0 = 0`.
pub fn loss_uncertainty<'t>(probs: &Tensor<'t>) -> Result<Tensor<'t>> {
    let shape = probs.shape();
    let (n, v) = match shape.as_slice() {
        &[n, v] if n >= 1 => (n, v),
        _ => {
            return Err(Error::Usage(format!(
                "loss_uncertainty needs an N×V matrix with N ≥ 1, got {shape:?}"
            )))
        }
    };
    Ok(probs.xlogx().sum_plus(n as f64 * (v as f64).ln()))
}

/// Negative nuclear norm of the stacked `N×C` hidden-state matrix.
pub fn loss_diversity<'t>(hiddens: &Tensor<'t>) -> Result<Tensor<'t>> {
    if hiddens.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Usage("loss_diversity needs at least one hidden state".into()));
    }
    Ok(hiddens.nuclear_norm()?.neg())
}

/// Scalar loss values for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f32,
    pub l2: f32,
    pub l3: f32,
    pub n: usize,
}

impl LossBreakdown {
    pub fn as_array(&self) -> [f32; 3] {
        [self.l1, self.l2, self.l3]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// The three losses as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct TraceLosses<'t> {
    pub eos: Tensor<'t>,
    pub uncertainty: Tensor<'t>,
    pub diversity: Tensor<'t>,
    pub n: usize,
}

impl<'t> TraceLosses<'t> {
    pub fn compute(tape: &'t Tape, trace: &TapeTrace<'t>, eos: usize) -> Result<Self> {
        if trace.is_empty() {
            return Err(Error::Usage("losses need a non-empty trace".into()));
        }
        let probs = trace.stacked_probs(tape)?;
        let hiddens = trace.stacked_hiddens(tape)?;
        Ok(Self {
            eos: loss_eos(&probs, eos)?,
            uncertainty: loss_uncertainty(&probs)?,
            diversity: loss_diversity(&hiddens)?,
            n: trace.len(),
        })
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l1: self.eos.item(),
            l2: self.uncertainty.item(),
            l3: self.diversity.item(),
            n: self.n,
        }
    }

    pub fn as_array(&self) -> [Tensor<'t>; 3] {
        [self.eos, self.uncertainty, self.diversity]
    }
}
