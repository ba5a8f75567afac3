//! Beam search over an abstract step function. Hypotheses compete on raw
//! summed log-probability; there is no length normalization.

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    /// Generated tokens (the start token is not included).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub ended_with_eos: bool,
    /// Every hypothesis that ended, best first.
    pub finished: Vec<(Vec<usize>, f64)>,
    pub step_calls: usize,
}

struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

/// `step(state, prev_token)` returns the next state and log-probabilities
/// over the vocabulary.
///
/// A candidate ending in `eos` is retired only when it ranks inside the top
/// `width` of its step; search stops once `width` hypotheses have retired,
/// no live hypothesis remains, or `max_len` is reached (live beams are then
/// retired as truncated). With `width == 1` this is exactly greedy decoding.
pub fn beam_search<S: Clone>(
    init: S,
    start_token: usize,
    eos: usize,
    width: usize,
    max_len: usize,
    mut step: impl FnMut(&S, usize) -> Result<(S, Vec<f32>)>,
) -> Result<BeamOutcome> {
    let width = width.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
    }];
    let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();
    let mut calls = 0;

    for depth in 0..max_len {
        let mut cands: Vec<(f64, usize, usize, S)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(start_token);
            let (state, logp) = step(&hyp.state, prev)?;
            calls += 1;
            for (tok, &lp) in logp.iter().enumerate() {
                cands.push((hyp.score + lp as f64, h, tok, state.clone()));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(width);
        for (rank, (score, h, tok, state)) in cands.into_iter().enumerate() {
            if tok == eos {
                if rank < width {
                    let mut tokens = live[h].tokens.clone();
                    tokens.push(tok);
                    finished.push((tokens, score, true));
                }
            } else if next.len() < width {
                let mut tokens = live[h].tokens.clone();
                tokens.push(tok);
                next.push(Hyp {
                    tokens,
                    score,
                    state,
                });
            }
            if next.len() == width && rank + 1 >= width {
                break;
            }
        }
        live = next;
        if finished.len() >= width || live.is_empty() {
            break;
        }
        if depth + 1 == max_len {
            finished.extend(live.drain(..).map(|h| (h.tokens, h.score, false)));
        }
    }
    if finished.is_empty() {
        finished.extend(live.into_iter().map(|h| (h.tokens, h.score, false)));
    }

    finished.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (tokens, log_prob, ended_with_eos) = finished[0].clone();
    Ok(BeamOutcome {
        tokens,
        log_prob,
        ended_with_eos,
        finished: finished.into_iter().map(|(t, s, _)| (t, s)).collect(),
        step_calls: calls,
    })
}
