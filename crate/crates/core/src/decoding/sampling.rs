//! Distribution filters and categorical sampling.

use rand::Rng;

/// Indices sorted by probability, descending; ties go to the lower id.
fn ranked(dist: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx
}

fn keep_renormalized(dist: &[f32], keep: &[usize]) -> Vec<f32> {
    let mass: f64 = keep.iter().map(|&i| dist[i] as f64).sum();
    let mut out = vec![0.0; dist.len()];
    for &i in keep {
        out[i] = (dist[i] as f64 / mass) as f32;
    }
    out
}

/// Keeps the smallest descending-probability prefix whose mass reaches `p`,
/// then renormalizes. `p >= 1` returns the input untouched.
pub fn nucleus_filter(dist: &[f32], p: f32) -> Vec<f32> {
    if p >= 1.0 {
        return dist.to_vec();
    }
    let order = ranked(dist);
    let mut mass = 0.0f64;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += dist[i] as f64;
        if mass >= p as f64 {
            cut = n + 1;
            break;
        }
    }
    keep_renormalized(dist, &order[..cut])
}

/// Keeps the `k` most probable tokens, renormalized.
pub fn top_k_filter(dist: &[f32], k: usize) -> Vec<f32> {
    if k >= dist.len() {
        return dist.to_vec();
    }
    let order = ranked(dist);
    keep_renormalized(dist, &order[..k.max(1)])
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from an (approximately) normalized distribution.
pub fn sample_categorical<R: Rng + ?Sized>(dist: &[f32], rng: &mut R) -> usize {
    let total: f64 = dist.iter().map(|&p| p as f64).sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p as f64;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Softmax of `logits / temperature`.
pub fn tempered_softmax(logits: &[f32], temperature: f32) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
