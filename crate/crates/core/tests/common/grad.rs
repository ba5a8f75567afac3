//! Gradient checks of every tape primitive and of the composed attack
//! objective.

use std::sync::Arc;

use super::{fd_grad, max_rel_err, nuclear_oracle, softmax, ModelOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verbose_lab::attack::TraceLosses;
use verbose_lab::decoding::replay_on_tape;
use verbose_lab::tensor::{Tape, Tensor};
use verbose_lab::vlm::{synth_dataset, ToyVlm};

const INSTANCES: u64 = 20;
const PRIMITIVE_TOL: f64 = 1e-3;
const END_TO_END_TOL: f64 = 5e-3;
const FD_STEP: f64 = 1e-6;

/// A sampled operand: shape, values, and the draw range.
struct Input {
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    /// Samples closer than this to zero are redrawn (kinks).
    gap: f64,
}

fn input(shape: &[usize], lo: f64, hi: f64) -> Input {
    Input {
        shape: shape.to_vec(),
        lo,
        hi,
        gap: 0.0,
    }
}

fn sample(inp: &Input, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = inp.shape.iter().product();
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(inp.lo..inp.hi) as f32 as f64;
            if v.abs() >= inp.gap {
                break v;
            }
        })
        .collect()
}

type Sampler = dyn Fn(&mut ChaCha8Rng) -> Vec<Input>;
type TapeOp = dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>;
type Oracle = dyn Fn(&[Vec<f64>], &[Vec<usize>]) -> Vec<f64>;

/// Compares tape gradients of `Σ w ⊙ op(inputs)` against central differences
/// of an f64 oracle over `INSTANCES` random draws.
fn check(name: &str, sampler: &Sampler, op: &TapeOp, oracle: &Oracle) {
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(instance * 7919 + name.len() as u64);
        let specs = sampler(&mut rng);
        let shapes: Vec<Vec<usize>> = specs.iter().map(|s| s.shape.clone()).collect();
        let values: Vec<Vec<f64>> = specs.iter().map(|s| sample(s, &mut rng)).collect();
        let out_len = oracle(&values, &shapes).len();
        let w: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0) as f32 as f64).collect();

        let tape = Tape::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| tape.leaf(s, v.iter().map(|&x| x as f32).collect()).unwrap())
            .collect();
        let out = op(&tape, &leaves);
        assert_eq!(out.numel(), out_len, "{name}: output size");
        let wt = tape.constant(&out.shape(), w.iter().map(|&x| x as f32).collect()).unwrap();
        let grads = out.mul(&wt).unwrap().sum().backward().unwrap();

        for (i, leaf) in leaves.iter().enumerate() {
            let analytic: Vec<f64> = grads.get_or_zeros(leaf).iter().map(|&g| g as f64).collect();
            let numeric = fd_grad(
                |x| {
                    let mut vals = values.clone();
                    vals[i] = x.to_vec();
                    oracle(&vals, &shapes).iter().zip(&w).map(|(o, w)| o * w).sum()
                },
                &values[i],
                FD_STEP,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= PRIMITIVE_TOL, "{name} instance {instance} input {i}: rel err {err}");
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn one_matrix(lo: f64, hi: f64, gap: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<Input> {
    move |rng| {
        let (m, n) = dims(rng);
        vec![Input {
            gap,
            ..input(&[m, n], lo, hi)
        }]
    }
}

fn map(f: fn(f64) -> f64) -> impl Fn(&[Vec<f64>], &[Vec<usize>]) -> Vec<f64> {
    move |v, _| v[0].iter().map(|&x| f(x)).collect()
}

fn rows(v: &[f64], shape: &[usize], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    v.chunks(*shape.last().unwrap()).flat_map(f).collect()
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
        }
    }
    out
}

pub fn binary_elementwise_ops() {
    let pair = |rng: &mut ChaCha8Rng| {
        let (m, n) = dims(rng);
        vec![input(&[m, n], -2.0, 2.0), input(&[m, n], -2.0, 2.0)]
    };
    check("add", &pair, &|_, x| x[0].add(&x[1]).unwrap(), &|v, _| {
        v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect()
    });
    check("sub", &pair, &|_, x| x[0].sub(&x[1]).unwrap(), &|v, _| {
        v[0].iter().zip(&v[1]).map(|(a, b)| a - b).collect()
    });
    check("mul", &pair, &|_, x| x[0].mul(&x[1]).unwrap(), &|v, _| {
        v[0].iter().zip(&v[1]).map(|(a, b)| a * b).collect()
    });
    // a tensor used twice accumulates both contributions
    check(
        "mul_self",
        &one_matrix(-2.0, 2.0, 0.0),
        &|_, x| x[0].mul(&x[0]).unwrap(),
        &map(|a| a * a),
    );
}

pub fn scalar_and_reduction_ops() {
    let one = one_matrix(-2.0, 2.0, 0.0);
    check("scale", &one, &|_, x| x[0].scale(1.5), &map(|a| 1.5 * a));
    check("neg", &one, &|_, x| x[0].neg(), &map(|a| -a));
    check("add_scalar", &one, &|_, x| x[0].add_scalar(0.25), &map(|a| a + 0.25));
    check("sum", &one, &|_, x| x[0].sum(), &|v, _| vec![v[0].iter().sum()]);
    check("sum_plus", &one, &|_, x| x[0].sum_plus(2.5), &|v, _| vec![v[0].iter().sum::<f64>() + 2.5]);
    check("mean", &one, &|_, x| x[0].mean(), &|v, _| {
        vec![v[0].iter().sum::<f64>() / v[0].len() as f64]
    });
    check(
        "reshape",
        &|rng| {
            let (m, n) = dims(rng);
            vec![input(&[m, n], -1.0, 1.0)]
        },
        &|_, x| {
            let n = x[0].numel();
            x[0].reshape(&[n]).unwrap()
        },
        &|v, _| v[0].clone(),
    );
}

pub fn nonlinearities() {
    check("tanh", &one_matrix(-3.0, 3.0, 0.0), &|_, x| x[0].tanh(), &map(f64::tanh));
    check("relu", &one_matrix(-2.0, 2.0, 0.05), &|_, x| x[0].relu(), &map(|v| v.max(0.0)));
    check(
        "sigmoid",
        &one_matrix(-4.0, 4.0, 0.0),
        &|_, x| x[0].sigmoid(),
        &map(|v| 1.0 / (1.0 + (-v).exp())),
    );
    check("log", &one_matrix(0.2, 3.0, 0.0), &|_, x| x[0].log(), &map(f64::ln));
    check("xlogx", &one_matrix(0.05, 1.0, 0.0), &|_, x| x[0].xlogx(), &map(|v| v * v.ln()));
}

pub fn matmul_and_add_row() {
    check(
        "matmul",
        &|rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            vec![input(&[m, k], -1.0, 1.0), input(&[k, n], -1.0, 1.0)]
        },
        &|_, x| x[0].matmul(&x[1]).unwrap(),
        &|v, s| matmul64(&v[0], &v[1], s[0][0], s[0][1], s[1][1]),
    );
    check(
        "add_row",
        &|rng| {
            let (m, n) = dims(rng);
            vec![input(&[m, n], -1.0, 1.0), input(&[n], -1.0, 1.0)]
        },
        &|_, x| x[0].add_row(&x[1]).unwrap(),
        &|v, s| rows(&v[0], &s[0], |r| r.iter().zip(&v[1]).map(|(a, b)| a + b).collect()),
    );
}

pub fn softmax_family() {
    let sampler = |rng: &mut ChaCha8Rng| {
        let (m, n) = dims(rng);
        vec![input(&[m, n + 1], -3.0, 3.0)]
    };
    check("softmax", &sampler, &|_, x| x[0].softmax(), &|v, s| rows(&v[0], &s[0], softmax));
    check("log_softmax", &sampler, &|_, x| x[0].log_softmax(), &|v, s| {
        rows(&v[0], &s[0], |r| softmax(r).iter().map(|p| p.ln()).collect())
    });
}

pub fn layer_norm_gradients() {
    check(
        "layer_norm",
        &|rng| {
            let m = rng.gen_range(1..4);
            let n = rng.gen_range(2..7);
            vec![input(&[m, n], -2.0, 2.0), input(&[n], 0.5, 1.5), input(&[n], -0.5, 0.5)]
        },
        &|_, x| x[0].layer_norm(&x[1], &x[2]).unwrap(),
        &|v, s| {
            rows(&v[0], &s[0], |r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
                let rs = 1.0 / (var + 1e-5).sqrt();
                r.iter()
                    .enumerate()
                    .map(|(j, a)| (a - mu) * rs * v[1][j] + v[2][j])
                    .collect()
            })
        },
    );
}

pub fn indexing_ops() {
    // the index pattern is drawn from the shape so the oracle can rebuild it
    fn pattern(len: usize) -> Vec<usize> {
        (0..2 * len).map(|i| (i * 7 + 3) % len).collect()
    }
    check(
        "gather",
        &|rng| {
            let (m, n) = dims(rng);
            vec![input(&[m, n], -1.0, 1.0)]
        },
        &|_, x| {
            let idx = pattern(x[0].numel());
            let len = idx.len();
            x[0].gather(Arc::from(idx), &[len]).unwrap()
        },
        &|v, _| pattern(v[0].len()).into_iter().map(|i| v[0][i]).collect(),
    );
    check(
        "embedding_lookup",
        &|rng| {
            let v = rng.gen_range(2..6);
            let d = rng.gen_range(1..5);
            vec![input(&[v, d], -1.0, 1.0)]
        },
        &|_, x| {
            let v = x[0].shape()[0];
            let ids: Vec<usize> = (0..5).map(|i| (i * 3) % v).collect();
            x[0].embedding_lookup(&ids).unwrap()
        },
        &|t, s| {
            let (v, d) = (s[0][0], s[0][1]);
            (0..5).flat_map(|i| t[0][(i * 3) % v * d..((i * 3) % v + 1) * d].to_vec()).collect()
        },
    );
    check(
        "concat_rows",
        &|rng| {
            let n = rng.gen_range(1..5);
            vec![
                input(&[1, n], -1.0, 1.0),
                input(&[rng.gen_range(1..3), n], -1.0, 1.0),
                input(&[1, n], -1.0, 1.0),
            ]
        },
        &|tape, x| tape.concat_rows(x).unwrap(),
        &|v, _| v.concat(),
    );
}

pub fn nuclear_norm_gradient() {
    check(
        "nuclear_norm",
        &|rng| {
            let m = rng.gen_range(1..7);
            let n = rng.gen_range(1..7);
            vec![input(&[m, n], -1.0, 1.0)]
        },
        &|_, x| x[0].nuclear_norm().unwrap(),
        &|v, s| vec![nuclear_oracle(s[0][0], s[0][1], &v[0])],
    );
}

/// Gradient of the weighted three-term objective with respect to pixels,
/// through the encoder and an unrolled decoder, against differences of the
/// f64 oracle model along the same token path.
pub fn combined_objective_end_to_end() {
    let lambdas = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [2.0, 0.05, 0.3]];
    for (case, seed) in (0..4u64).enumerate() {
        let model = ToyVlm::standard(seed + 11);
        let oracle = ModelOracle::new(&model);
        let img = synth_dataset(1, seed + 5, &model.vocab).remove(0).image;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=4);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(4..model.vocab.len())).collect();
        let lambda = lambdas[case];

        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let px = bound.image_input(&img, true).unwrap();
        let trace = replay_on_tape(&bound, &px, &tokens).unwrap();
        let l = TraceLosses::compute(&tape, &trace, model.vocab.eos_id).unwrap();
        let total = l
            .eos
            .scale(lambda[0] as f32)
            .add(&l.uncertainty.scale(lambda[1] as f32))
            .unwrap()
            .add(&l.diversity.scale(lambda[2] as f32))
            .unwrap();
        let grads = total.backward().unwrap();
        let g = grads.get_or_zeros(&px);

        let x64: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
        let f = |x: &[f64]| oracle.objective(x, &tokens, lambda);
        assert!(
            (f(&x64) - total.item() as f64).abs() <= 1e-4 * f(&x64).abs().max(1.0),
            "forward mismatch"
        );
        // the 8 pixels with the largest analytic gradient, where the signal is well above noise
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &p in &order[..8] {
            let mut x = x64.clone();
            let h = 1e-5;
            x[p] += h;
            let up = f(&x);
            x[p] -= 2.0 * h;
            let down = f(&x);
            let numeric = (up - down) / (2.0 * h);
            let err = (g[p] as f64 - numeric).abs() / (g[p] as f64).abs().max(numeric.abs()).max(1e-2);
            assert!(err <= END_TO_END_TOL, "case {case} pixel {p}: analytic {} numeric {numeric}", g[p]);
        }
    }
}
