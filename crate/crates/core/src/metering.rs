//! Inference cost accounting: analytic FLOPs, decoder calls, wall clock and
//! a proxy energy proportional to FLOPs.
//!
//! Counting rules: a `M×K · K×N` product is `2MKN`; elementwise arithmetic,
//! bias adds and activations are one op per element; softmax is `3V`;
//! layer norm is `5d`. Embedding lookups and token selection are free.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::{generate_with, DecodePolicy, GenerateOptions, GenerationTrace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::vlm::{ToyVlm, VlmDims};

pub const DEFAULT_JOULES_PER_FLOP: f64 = 1e-9;

/// FLOPs spent before the first decoder step: patch embedding, pooling, the
/// context MLP, the per-gate context projections and the initial state.
pub fn encoder_flops(d: &VlmDims) -> u64 {
    let (np, pd, dm, eh, c) = (
        d.patches() as u64,
        d.patch_dim() as u64,
        d.d_model as u64,
        d.enc_hidden as u64,
        d.hidden as u64,
    );
    let patch = 2 * np * pd * dm + 2 * np * dm + np * dm;
    let pool = 2 * np * dm;
    let norm = 5 * dm;
    let mlp = (2 * dm * eh + 2 * eh) + (2 * eh * dm + 2 * dm);
    let gates = 3 * (2 * dm * c + c);
    let init = 2 * dm * c + 2 * c;
    patch + pool + norm + mlp + gates + init
}

/// FLOPs of one decoder step for one sequence.
pub fn decoder_step_flops(d: &VlmDims) -> u64 {
    let (dm, c, v) = (d.d_model as u64, d.hidden as u64, d.vocab as u64);
    // r and z: input and recurrent products, two adds, sigmoid
    let gate = 2 * dm * c + 2 * c * c + 3 * c;
    // candidate: recurrent product + bias, input product, two adds, reset product, tanh
    let cand = (2 * c * c + c) + 2 * dm * c + 4 * c;
    let blend = 3 * c;
    let head = 2 * c * v + v + 3 * v;
    2 * gate + cand + blend + head
}

/// `encoder + steps × per_step`.
pub fn generation_flops(d: &VlmDims, steps: usize) -> u64 {
    encoder_flops(d) + steps as u64 * decoder_step_flops(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterReading {
    pub tokens: usize,
    pub decoder_calls: usize,
    pub flops: u64,
    pub wall_seconds: f64,
    pub proxy_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Meter {
    pub joules_per_flop: f64,
}

impl Default for Meter {
    fn default() -> Self {
        Self {
            joules_per_flop: DEFAULT_JOULES_PER_FLOP,
        }
    }
}

impl Meter {
    pub fn new(joules_per_flop: f64) -> Result<Self> {
        if !(joules_per_flop >= 0.0 && joules_per_flop.is_finite()) {
            return Err(Error::Config(format!(
                "joules_per_flop must be finite and non-negative, got {joules_per_flop}"
            )));
        }
        Ok(Self { joules_per_flop })
    }

    /// Generates once and meters it. FLOPs are charged per decoder call, so
    /// beam search pays for every hypothesis it expands.
    pub fn measure(
        &self,
        model: &ToyVlm,
        x: &Image,
        policy: &DecodePolicy,
        opts: GenerateOptions,
    ) -> Result<(GenerationTrace, MeterReading)> {
        let start = Instant::now();
        let trace = generate_with(model, x, policy, opts)?;
        let wall_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let flops = generation_flops(&model.dims, trace.decoder_calls);
        let reading = MeterReading {
            tokens: trace.len(),
            decoder_calls: trace.decoder_calls,
            flops,
            wall_seconds,
            proxy_energy: flops as f64 * self.joules_per_flop,
        };
        Ok((trace, reading))
    }
}

pub fn meter_generation(model: &ToyVlm, x: &Image, policy: &DecodePolicy) -> Result<(GenerationTrace, MeterReading)> {
    Meter::default().measure(model, x, policy, GenerateOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares. A constant response gives slope 0 and `R² = 0`.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 3 {
        return Err(Error::Numeric(format!("linear fit needs >= 3 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Numeric("linear fit input is not finite".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Numeric("linear fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy <= 0.0 {
        0.0
    } else {
        let ss_res: f64 = points.iter().map(|&(x, y)| (y - slope * x - intercept).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// One forced length of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tokens: usize,
    pub flops: u64,
    pub proxy_energy: f64,
    pub wall_seconds: Vec<f64>,
    pub median_wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSweep {
    pub points: Vec<SweepPoint>,
    pub flops_fit: LinearFit,
    pub wall_fit: LinearFit,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Meters forced-length generations of `x` at every length, `reps` times
/// each, and fits FLOPs and median wall clock against length. Runs on the
/// calling thread.
pub fn length_sweep(
    meter: &Meter,
    model: &ToyVlm,
    x: &Image,
    policy: &DecodePolicy,
    lengths: &[usize],
    reps: usize,
) -> Result<LengthSweep> {
    if reps == 0 || lengths.contains(&0) {
        return Err(Error::Usage("length sweep needs reps >= 1 and lengths >= 1".into()));
    }
    let mut points = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let opts = GenerateOptions { forced_len: Some(n) };
        let policy = policy.with_max_len(policy.max_len.max(n));
        // one untimed pass so allocation warm-up is not charged to the first length
        meter.measure(model, x, &policy, opts)?;
        let mut walls = Vec::with_capacity(reps);
        let mut last = None;
        for _ in 0..reps {
            let (_, r) = meter.measure(model, x, &policy, opts)?;
            walls.push(r.wall_seconds);
            last = Some(r);
        }
        let r = last.expect("reps >= 1");
        points.push(SweepPoint {
            tokens: r.tokens,
            flops: r.flops,
            proxy_energy: r.proxy_energy,
            median_wall_seconds: median(&walls),
            wall_seconds: walls,
        });
    }
    let xy = |f: &dyn Fn(&SweepPoint) -> f64| -> Vec<(f64, f64)> {
        points.iter().map(|p| (p.tokens as f64, f(p))).collect()
    };
    let flops_fit = fit_linear(&xy(&|p| p.flops as f64))?;
    let wall_fit = fit_linear(&xy(&|p| p.median_wall_seconds))?;
    Ok(LengthSweep {
        points,
        flops_fit,
        wall_fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterRow {
    pub image_id: usize,
    pub policy: String,
    #[serde(rename = "N")]
    pub tokens: usize,
    pub decoder_calls: usize,
    pub flops: u64,
    pub wall_seconds: f64,
    pub proxy_energy: f64,
}

impl MeterRow {
    pub fn new(image_id: usize, policy: &DecodePolicy, r: &MeterReading) -> Self {
        Self {
            image_id,
            policy: policy.to_string(),
            tokens: r.tokens,
            decoder_calls: r.decoder_calls,
            flops: r.flops,
            wall_seconds: r.wall_seconds,
            proxy_energy: r.proxy_energy,
        }
    }
}

/// `image_id,policy,N,decoder_calls,flops,wall_seconds,proxy_energy`
pub fn write_meter_csv<W: Write>(rows: &[MeterRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
