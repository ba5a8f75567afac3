mod common;

use common::ModelOracle;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use verbose_lab::decoding::{
    beam_search, generate, generate_with, teacher_forced_dists, DecodePolicy, GenerateOptions, StopReason,
};
use verbose_lab::vlm::{synth_dataset, ToyVlm};

const DRAWS: u64 = 4000;
/// Reject only when the sampler is clearly off; a correct sampler fails
/// this with probability 1e-4 per test.
const P_VALUE_FLOOR: f64 = 1e-4;

fn chi_square_p(counts: &[u64], expected: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(expected) {
        if p > 0.0 {
            let e = p * total as f64;
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            assert_eq!(c, 0, "sampled a token outside the support");
        }
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

/// Expected first-token distribution: f64 oracle step followed by a plain
/// sort-and-cut filter.
fn filtered_oracle(dist: &[f64], keep: impl Fn(&[(usize, f64)]) -> usize) -> Vec<f64> {
    let mut order: Vec<(usize, f64)> = dist.iter().cloned().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = keep(&order);
    let mass: f64 = order[..k].iter().map(|x| x.1).sum();
    let mut out = vec![0.0; dist.len()];
    for &(i, p) in &order[..k] {
        out[i] = p / mass;
    }
    out
}

fn first_token_counts(model: &ToyVlm, x: &verbose_lab::Image, make: impl Fn(u64) -> DecodePolicy) -> Vec<u64> {
    let mut counts = vec![0u64; model.vocab.len()];
    for seed in 0..DRAWS {
        let t = generate(model, x, &make(seed)).unwrap();
        counts[t.tokens[0]] += 1;
    }
    counts
}

/// A flat-ish model so that filtering actually matters.
fn model_and_image() -> (ToyVlm, verbose_lab::Image) {
    let mut m = ToyVlm::standard(21);
    for v in m.params.out_w.data.iter_mut() {
        *v *= 3.0;
    }
    let x = synth_dataset(1, 4, &m.vocab).remove(0).image;
    (m, x)
}

#[test]
fn top_k_sampling_matches_filtered_distribution() {
    let (m, x) = model_and_image();
    let oracle = ModelOracle::new(&m);
    let dist = &oracle.rollout(&x.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), &[0]).probs[0];
    let expected = filtered_oracle(dist, |_| 10);
    let counts = first_token_counts(&m, &x, |s| DecodePolicy::top_k(10, 1, s));
    let p = chi_square_p(&counts, &expected);
    assert!(p > P_VALUE_FLOOR, "chi-square p = {p}");
}

#[test]
fn nucleus_sampling_matches_filtered_distribution() {
    let (m, x) = model_and_image();
    let oracle = ModelOracle::new(&m);
    let dist = &oracle.rollout(&x.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), &[0]).probs[0];
    let expected = filtered_oracle(dist, |order| {
        let mut acc = 0.0;
        order.iter().position(|&(_, p)| {
            acc += p;
            acc >= 0.9
        })
        .map_or(order.len(), |i| i + 1)
    });
    assert!(expected.iter().filter(|&&p| p > 0.0).count() < m.vocab.len());
    let counts = first_token_counts(&m, &x, |s| DecodePolicy::nucleus(0.9, 1, s));
    let p = chi_square_p(&counts, &expected);
    assert!(p > P_VALUE_FLOOR, "chi-square p = {p}");
}

#[test]
fn greedy_follows_oracle_argmax() {
    let m = ToyVlm::standard(5);
    let oracle = ModelOracle::new(&m);
    for s in synth_dataset(5, 8, &m.vocab) {
        let t = generate(&m, &s.image, &DecodePolicy::greedy(20)).unwrap();
        let x: Vec<f64> = s.image.data.iter().map(|&v| v as f64).collect();
        let r = oracle.rollout(&x, &t.tokens);
        for (i, p) in r.probs.iter().enumerate() {
            let best = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(p[t.tokens[i]] >= best - 1e-6, "step {i}");
            let on_model = &t.dists[i];
            for (a, b) in on_model.iter().zip(p) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
        let tf = teacher_forced_dists(&m, &s.image, &t.tokens).unwrap();
        assert_eq!(tf, t.dists);
    }
}

#[test]
fn forced_length_never_emits_eos() {
    let m = ToyVlm::standard(6);
    let x = synth_dataset(1, 3, &m.vocab).remove(0).image;
    for n in [1, 7, 64] {
        for policy in [DecodePolicy::greedy(256), DecodePolicy::nucleus(0.9, 256, 1)] {
            let t = generate_with(&m, &x, &policy, GenerateOptions { forced_len: Some(n) }).unwrap();
            assert_eq!(t.tokens.len(), n);
            assert!(!t.tokens.contains(&m.vocab.eos_id));
            assert_eq!(t.stop_reason, StopReason::MaxLen);
        }
    }
}

/// Exhaustive search over a small Markov chain: with a beam wide enough to
/// hold every hypothesis, beam search must return the best sequence.
#[test]
fn wide_beam_finds_exhaustive_optimum() {
    let v = 3;
    let eos = 2;
    let max_len = 4;
    let table = |prev: usize| -> Vec<f32> {
        let rows = [[0.5f32, 0.3, 0.2], [0.1, 0.45, 0.45], [0.6, 0.3, 0.1], [0.35, 0.6, 0.05]];
        rows[prev].iter().map(|p| p.ln()).collect()
    };
    let start = 3;
    let outcome = beam_search((), start, eos, 1000, max_len, |_, prev| Ok(((), table(prev)))).unwrap();

    let mut best = f64::NEG_INFINITY;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((seq, score)) = stack.pop() {
        let prev = seq.last().copied().unwrap_or(start);
        if seq.last() == Some(&eos) || seq.len() == max_len {
            best = best.max(score);
            continue;
        }
        for (tok, lp) in table(prev).iter().enumerate().take(v) {
            let mut s = seq.clone();
            s.push(tok);
            stack.push((s, score + *lp as f64));
        }
    }
    assert!((outcome.log_prob - best).abs() < 1e-9, "{} vs {best}", outcome.log_prob);
}
