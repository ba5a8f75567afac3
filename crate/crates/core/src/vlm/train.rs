//! Teacher-forced cross-entropy training with plain SGD and norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SynthSample;
use super::model::ToyVlm;
use crate::decoding::{generate, DecodePolicy};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token NLL over the training set before any update.
    pub initial_loss: f32,
    /// Mean per-token NLL over the training set after each epoch.
    pub epoch_losses: Vec<f32>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f32 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Builds the summed negative log-likelihood of a batch on `tape`.
/// Returns `(nll_sum, target_token_count)`.
fn batch_nll<'t>(
    model: &ToyVlm,
    tape: &'t Tape,
    trainable: bool,
    batch: &[&SynthSample],
) -> Result<(Tensor<'t>, usize, crate::vlm::BoundParams<'t>)> {
    let bound = model.bind(tape, trainable);
    let v = model.dims.vocab;
    let pixels: Vec<f32> = batch.iter().flat_map(|s| s.image.data.iter().copied()).collect();
    let pixels = tape.constant(&[pixels.len()], pixels)?;
    let enc = bound.encode(&pixels)?;
    let dc = bound.decoder_context(&enc.ctx)?;
    let mut h = bound.initial_hidden(&enc.ctx)?;
    let steps = batch.iter().map(|s| s.caption.len()).max().unwrap_or(0);
    let mut parts = Vec::with_capacity(steps);
    let mut count = 0;
    for t in 0..steps {
        let inputs: Vec<usize> = batch
            .iter()
            .map(|s| match t {
                0 => model.vocab.bos_id,
                _ => s.caption.get(t - 1).copied().unwrap_or(model.vocab.pad_id),
            })
            .collect();
        let out = bound.step(&dc, &h, &inputs)?;
        let idx: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter_map(|(b, s)| s.caption.get(t).map(|&y| b * v + y))
            .collect();
        if !idx.is_empty() {
            count += idx.len();
            let n = idx.len();
            parts.push(out.logits.log_softmax().gather(idx.into(), &[n, 1])?);
        }
        h = out.hidden;
    }
    let nll = tape.concat_rows(&parts)?.sum().neg();
    Ok((nll, count, bound.p))
}

/// Mean per-token NLL over `data`, evaluated in fixed order.
pub fn dataset_loss(model: &ToyVlm, data: &[SynthSample], batch_size: usize) -> Result<f32> {
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let tape = Tape::new();
        let (nll, n, _) = batch_nll(model, &tape, false, &refs)?;
        total += nll.item() as f64;
        tokens += n;
    }
    Ok((total / tokens.max(1) as f64) as f32)
}

/// `-Σ log p(y_i)` of one caption under teacher forcing.
pub fn caption_nll(model: &ToyVlm, image: &Image, caption: &[usize]) -> Result<f32> {
    let sample = SynthSample {
        image: image.clone(),
        caption: caption.to_vec(),
    };
    let tape = Tape::new();
    let (nll, _, _) = batch_nll(model, &tape, false, &[&sample])?;
    Ok(nll.item())
}

pub fn train(model: &mut ToyVlm, data: &[SynthSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Usage("training data is empty".into()));
    }
    let eval_batch = cfg.batch_size.max(1);
    let initial_loss = dataset_loss(model, data, eval_batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&SynthSample> = chunk.iter().map(|&i| &data[i]).collect();
            let tape = Tape::new();
            let (nll, count, bound) = batch_nll(model, &tape, true, &batch)?;
            let loss = nll.scale(1.0 / count as f32);
            if !loss.item().is_finite() {
                return Err(Error::Training {
                    epoch,
                    loss: loss.item(),
                });
            }
            let grads = loss.backward()?;
            let grads: Vec<Vec<f32>> = bound.iter().map(|(_, t)| grads.get_or_zeros(&t)).collect();
            let norm = grads
                .iter()
                .flatten()
                .map(|g| (*g as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32;
            let scale = if norm > cfg.clip_norm {
                cfg.clip_norm / norm
            } else {
                1.0
            };
            for ((_, p), g) in model.params.iter_mut().zip(&grads) {
                for (w, d) in p.data.iter_mut().zip(g) {
                    *w -= cfg.lr * scale * d;
                }
            }
        }
        let l = dataset_loss(model, data, eval_batch)?;
        if !l.is_finite() || !model.all_finite() {
            return Err(Error::Training { epoch, loss: l });
        }
        epoch_losses.push(l);
    }
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub mean_len: f64,
    /// Fraction of greedy captions that parse under the caption grammar.
    pub well_formed: f64,
    /// Fraction of greedy captions identical to the reference.
    pub exact: f64,
}

/// Greedy-decodes every sample and scores the captions.
pub fn evaluate_captions(model: &ToyVlm, data: &[SynthSample], max_len: usize) -> Result<CaptionEval> {
    let policy = DecodePolicy::greedy(max_len);
    let (mut len, mut ok, mut exact) = (0usize, 0usize, 0usize);
    for s in data {
        let t = generate(model, &s.image, &policy)?;
        len += t.len();
        ok += model.vocab.is_well_formed(&t.tokens) as usize;
        exact += (t.tokens == s.caption) as usize;
    }
    let n = data.len().max(1) as f64;
    Ok(CaptionEval {
        mean_len: len as f64 / n,
        well_formed: ok as f64 / n,
        exact: exact as f64 / n,
    })
}
