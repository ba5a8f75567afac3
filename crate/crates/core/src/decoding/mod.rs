//! Auto-regressive generation policies and trace capture.

mod beam;
mod sampling;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::{beam_search, BeamOutcome};
pub use sampling::{argmax, nucleus_filter, sample_categorical, tempered_softmax, top_k_filter};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor};
use crate::vlm::{BoundVlm, ToyVlm};

/// Default cap on generated tokens at evaluation time.
pub const EVAL_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeKind {
    Greedy,
    Beam { width: usize },
    TopK { k: usize },
    Nucleus { p: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub kind: DecodeKind,
    pub temperature: f32,
    pub max_len: usize,
    pub seed: u64,
}

impl DecodePolicy {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            kind: DecodeKind::Greedy,
            temperature: 1.0,
            max_len,
            seed: 0,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        Self {
            kind: DecodeKind::Beam { width },
            ..Self::greedy(max_len)
        }
    }

    pub fn top_k(k: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind: DecodeKind::TopK { k },
            seed,
            ..Self::greedy(max_len)
        }
    }

    pub fn nucleus(p: f32, max_len: usize, seed: u64) -> Self {
        Self {
            kind: DecodeKind::Nucleus { p },
            seed,
            ..Self::greedy(max_len)
        }
    }

    pub fn with_max_len(self, max_len: usize) -> Self {
        Self { max_len, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, DecodeKind::TopK { .. } | DecodeKind::Nucleus { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(format!("decode policy {self}: {m}")));
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        match self.kind {
            DecodeKind::Beam { width: 0 } => bad("beam width must be >= 1"),
            DecodeKind::TopK { k: 0 } => bad("k must be >= 1"),
            DecodeKind::Nucleus { p } if !(p > 0.0 && p <= 1.0) => bad("p must be in (0, 1]"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DecodePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DecodeKind::Greedy => write!(f, "greedy"),
            DecodeKind::Beam { width } => write!(f, "beam:{width}"),
            DecodeKind::TopK { k } => write!(f, "top_k:{k}"),
            DecodeKind::Nucleus { p } => write!(f, "nucleus:{p}"),
        }
    }
}

/// Parses `greedy`, `beam:W`, `top_k:K` or `nucleus:P` (max_len and seed
/// take defaults and are set by the caller).
impl FromStr for DecodePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let err = || Error::Config(format!("invalid decode policy {s:?}"));
        let policy = match (name, arg) {
            ("greedy", None) => Self::greedy(EVAL_MAX_LEN),
            ("beam", Some(a)) => Self::beam(a.parse().map_err(|_| err())?, EVAL_MAX_LEN),
            ("top_k", Some(a)) => Self::top_k(a.parse().map_err(|_| err())?, EVAL_MAX_LEN, 0),
            ("nucleus", Some(a)) => Self::nucleus(a.parse().map_err(|_| err())?, EVAL_MAX_LEN, 0),
            _ => return Err(err()),
        };
        policy.validate().map_err(|_| err())?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

/// A finished generation with plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub tokens: Vec<usize>,
    /// Model distribution `f_i` at each step (before temperature/filtering).
    pub dists: Vec<Vec<f32>>,
    /// Decoder hidden state `g_i` at each step.
    pub hiddens: Vec<Vec<f32>>,
    pub eos_emitted: bool,
    pub stop_reason: StopReason,
    /// Number of decoder-cell evaluations spent (beam search uses more than `len()`).
    pub decoder_calls: usize,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// CSV with one row per step: `step,token,eos_prob,entropy`.
    pub fn write_csv<W: Write>(&self, eos: usize, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,token,eos_prob,entropy")?;
        for (i, (tok, dist)) in self.tokens.iter().zip(&self.dists).enumerate() {
            let entropy: f64 = dist
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -(p as f64) * (p as f64).ln())
                .sum();
            writeln!(out, "{},{},{},{}", i + 1, tok, dist[eos], entropy)?;
        }
        Ok(())
    }
}

/// A generation whose per-step values live on a tape.
#[derive(Debug, Clone)]
pub struct TapeTrace<'t> {
    pub tokens: Vec<usize>,
    /// `1×V` each
    pub logits: Vec<Tensor<'t>>,
    /// `1×V` each
    pub probs: Vec<Tensor<'t>>,
    /// `1×C` each
    pub hiddens: Vec<Tensor<'t>>,
    pub encoder_activations: Vec<Tensor<'t>>,
    pub stop_reason: StopReason,
    pub decoder_calls: usize,
}

impl<'t> TapeTrace<'t> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `N×V` stacked distributions.
    pub fn stacked_probs(&self, tape: &'t Tape) -> Result<Tensor<'t>> {
        tape.concat_rows(&self.probs)
    }

    /// `N×V` stacked logits.
    pub fn stacked_logits(&self, tape: &'t Tape) -> Result<Tensor<'t>> {
        tape.concat_rows(&self.logits)
    }

    /// `N×C` stacked hidden states.
    pub fn stacked_hiddens(&self, tape: &'t Tape) -> Result<Tensor<'t>> {
        tape.concat_rows(&self.hiddens)
    }

    pub fn to_trace(&self, eos: usize) -> GenerationTrace {
        GenerationTrace {
            tokens: self.tokens.clone(),
            dists: self.probs.iter().map(|t| t.value()).collect(),
            hiddens: self.hiddens.iter().map(|t| t.value()).collect(),
            eos_emitted: self.tokens.last() == Some(&eos),
            stop_reason: self.stop_reason,
            decoder_calls: self.decoder_calls,
        }
    }
}

/// Extra controls for [`generate_on_tape`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions {
    /// Suppress EOS and stop after exactly this many tokens.
    pub forced_len: Option<usize>,
}

fn choose_token(
    policy: &DecodePolicy,
    logits: &[f32],
    eos: usize,
    suppress_eos: bool,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut logits = logits.to_vec();
    if suppress_eos {
        logits[eos] = f32::NEG_INFINITY;
    }
    match policy.kind {
        DecodeKind::Greedy | DecodeKind::Beam { .. } => argmax(&logits),
        DecodeKind::TopK { k } => {
            let d = top_k_filter(&tempered_softmax(&logits, policy.temperature), k);
            sample_categorical(&d, rng)
        }
        DecodeKind::Nucleus { p } => {
            let d = nucleus_filter(&tempered_softmax(&logits, policy.temperature), p);
            sample_categorical(&d, rng)
        }
    }
}

/// Runs the decoder on `pixels` (one image), recording every step on the
/// bound model's tape. Sampled tokens are plain integers, so gradients flow
/// only through the recorded distributions and hidden states.
pub fn generate_on_tape<'t>(
    bound: &BoundVlm<'_, 't>,
    pixels: &Tensor<'t>,
    policy: &DecodePolicy,
    opts: GenerateOptions,
) -> Result<TapeTrace<'t>> {
    policy.validate()?;
    if let DecodeKind::Beam { width } = policy.kind {
        if opts.forced_len.is_none() {
            let outcome = beam_tokens(bound, pixels, width, policy.max_len)?;
            let mut trace = replay_on_tape(bound, pixels, &outcome.tokens)?;
            trace.decoder_calls = outcome.step_calls;
            return Ok(trace);
        }
    }
    let vocab = &bound.model.vocab;
    let enc = bound.encode(pixels)?;
    let dc = bound.decoder_context(&enc.ctx)?;
    let mut h = bound.initial_hidden(&enc.ctx)?;
    let max_len = opts.forced_len.unwrap_or(policy.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut trace = TapeTrace {
        tokens: Vec::new(),
        logits: Vec::new(),
        probs: Vec::new(),
        hiddens: Vec::new(),
        encoder_activations: enc.activations,
        stop_reason: StopReason::MaxLen,
        decoder_calls: 0,
    };
    let mut prev = vocab.bos_id;
    while trace.tokens.len() < max_len {
        let out = bound.step(&dc, &h, &[prev])?;
        trace.decoder_calls += 1;
        let tok = choose_token(
            policy,
            &out.logits.data(),
            vocab.eos_id,
            opts.forced_len.is_some(),
            &mut rng,
        );
        h = out.hidden;
        trace.tokens.push(tok);
        trace.logits.push(out.logits);
        trace.probs.push(out.probs);
        trace.hiddens.push(out.hidden);
        if tok == vocab.eos_id {
            trace.stop_reason = StopReason::Eos;
            break;
        }
        prev = tok;
    }
    Ok(trace)
}

/// Teacher-forces `tokens` through the decoder, recording each step.
pub fn replay_on_tape<'t>(
    bound: &BoundVlm<'_, 't>,
    pixels: &Tensor<'t>,
    tokens: &[usize],
) -> Result<TapeTrace<'t>> {
    if tokens.is_empty() {
        return Err(Error::Usage("cannot replay an empty token sequence".into()));
    }
    let vocab = &bound.model.vocab;
    let enc = bound.encode(pixels)?;
    let dc = bound.decoder_context(&enc.ctx)?;
    let mut h = bound.initial_hidden(&enc.ctx)?;
    let mut trace = TapeTrace {
        tokens: tokens.to_vec(),
        logits: Vec::with_capacity(tokens.len()),
        probs: Vec::with_capacity(tokens.len()),
        hiddens: Vec::with_capacity(tokens.len()),
        encoder_activations: enc.activations,
        stop_reason: if tokens.last() == Some(&vocab.eos_id) {
            StopReason::Eos
        } else {
            StopReason::MaxLen
        },
        decoder_calls: tokens.len(),
    };
    let mut prev = vocab.bos_id;
    for &tok in tokens {
        let out = bound.step(&dc, &h, &[prev])?;
        h = out.hidden;
        trace.logits.push(out.logits);
        trace.probs.push(out.probs);
        trace.hiddens.push(out.hidden);
        prev = tok;
    }
    Ok(trace)
}

fn beam_tokens<'t>(
    bound: &BoundVlm<'_, 't>,
    pixels: &Tensor<'t>,
    width: usize,
    max_len: usize,
) -> Result<BeamOutcome> {
    let vocab = &bound.model.vocab;
    let enc = bound.encode(pixels)?;
    let dc = bound.decoder_context(&enc.ctx)?;
    let h0 = bound.initial_hidden(&enc.ctx)?;
    beam_search(h0, vocab.bos_id, vocab.eos_id, width, max_len, |h, prev| {
        let out = bound.step(&dc, h, &[prev])?;
        let lp = out.logits.log_softmax().value();
        Ok((out.hidden, lp))
    })
}

/// Generates a caption for `x` under `policy`.
pub fn generate(model: &ToyVlm, x: &Image, policy: &DecodePolicy) -> Result<GenerationTrace> {
    generate_with(model, x, policy, GenerateOptions::default())
}

pub fn generate_with(
    model: &ToyVlm,
    x: &Image,
    policy: &DecodePolicy,
    opts: GenerateOptions,
) -> Result<GenerationTrace> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let pixels = bound.image_input(x, false)?;
    let trace = generate_on_tape(&bound, &pixels, policy, opts)?;
    Ok(trace.to_trace(model.vocab.eos_id))
}

/// Beam search trace; `width == 1` reproduces greedy decoding.
pub fn beam_decode(model: &ToyVlm, x: &Image, width: usize, max_len: usize) -> Result<GenerationTrace> {
    generate(model, x, &DecodePolicy::beam(width, max_len))
}

/// Recomputes the per-step distributions for a fixed token sequence.
pub fn teacher_forced_dists(model: &ToyVlm, x: &Image, tokens: &[usize]) -> Result<Vec<Vec<f32>>> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let pixels = bound.image_input(x, false)?;
    let trace = replay_on_tape(&bound, &pixels, tokens)?;
    Ok(trace.probs.iter().map(|t| t.value()).collect())
}
