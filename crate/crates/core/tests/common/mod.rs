//! Independent f64 oracles shared by the integration tests.

#![allow(dead_code)]

pub mod grad;
pub mod invariants;

use verbose_lab::vlm::ToyVlm;

/// Elementwise relative error with an absolute floor, so entries near zero
/// are compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Central finite differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic two-sided Jacobi rotations.
pub fn sym_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Sum of singular values via the eigenvalues of `AᵀA`, or of `AAᵀ` when
/// that is smaller (the extra zero eigenvalues of the larger Gram matrix
/// would turn rounding noise into `sqrt(ε)`-sized errors).
pub fn nuclear_oracle(rows: usize, cols: usize, a: &[f64]) -> f64 {
    let at = |r: usize, c: usize| a[r * cols + c];
    let (k, inner) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = (0..inner)
                .map(|l| if cols <= rows { at(l, i) * at(l, j) } else { at(i, l) * at(j, l) })
                .sum();
        }
    }
    sym_eigenvalues(gram, k).into_iter().map(|e| e.max(0.0).sqrt()).sum()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `x (r×k) · w (k×c)`
fn matvec_rows(x: &[f64], r: usize, k: usize, w: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..k {
            let xv = x[i * k + j];
            for l in 0..c {
                out[i * c + l] += xv * w[j * c + l];
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// A plain f64 re-statement of the captioner's forward pass.
pub struct ModelOracle {
    p: std::collections::HashMap<&'static str, Vec<f64>>,
    size: usize,
    channels: usize,
    patch: usize,
    d: usize,
    eh: usize,
    c: usize,
    v: usize,
    pub bos: usize,
    pub eos: usize,
}

pub struct Rollout {
    pub probs: Vec<Vec<f64>>,
    pub hiddens: Vec<Vec<f64>>,
}

impl ModelOracle {
    pub fn new(m: &ToyVlm) -> Self {
        let p = m
            .params
            .iter()
            .map(|(n, p)| (n, p.data.iter().map(|&v| v as f64).collect()))
            .collect();
        Self {
            p,
            size: m.dims.image_size,
            channels: m.dims.channels,
            patch: m.dims.patch,
            d: m.dims.d_model,
            eh: m.dims.enc_hidden,
            c: m.dims.hidden,
            v: m.dims.vocab,
            bos: m.vocab.bos_id,
            eos: m.vocab.eos_id,
        }
    }

    fn w(&self, name: &str) -> &[f64] {
        &self.p[name]
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let (s, ps, d) = (self.size, self.patch, self.d);
        let side = s / ps;
        let np = side * side;
        let pd = self.channels * ps * ps;
        let mut patches = vec![0.0; np * pd];
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut k = 0;
                for ch in 0..self.channels {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            patches[row * pd + k] = x[ch * s * s + (py * ps + dy) * s + px * ps + dx];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut feats = matvec_rows(&patches, np, pd, self.w("patch_w"), d);
        let (pb, pos) = (self.w("patch_b"), self.w("pos_embed"));
        for i in 0..np {
            for j in 0..d {
                feats[i * d + j] = (feats[i * d + j] + pb[j] + pos[i * d + j]).max(0.0);
            }
        }
        let pooled: Vec<f64> = (0..d).map(|j| (0..np).map(|i| feats[i * d + j]).sum::<f64>() / np as f64).collect();
        let mu = pooled.iter().sum::<f64>() / d as f64;
        let var = pooled.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        let (g, b) = (self.w("ln_gamma"), self.w("ln_beta"));
        let normed: Vec<f64> = (0..d).map(|j| (pooled[j] - mu) * rs * g[j] + b[j]).collect();
        let mut hid = matvec_rows(&normed, 1, d, self.w("enc_w1"), self.eh);
        for (h, b) in hid.iter_mut().zip(self.w("enc_b1")) {
            *h = (*h + b).tanh();
        }
        let out = matvec_rows(&hid, 1, self.eh, self.w("enc_w2"), d);
        (0..d).map(|j| out[j] + self.w("enc_b2")[j] + normed[j]).collect()
    }

    /// Teacher-forces `tokens` and returns every step's distribution and hidden state.
    pub fn rollout(&self, x: &[f64], tokens: &[usize]) -> Rollout {
        let (d, c, v) = (self.d, self.c, self.v);
        let ctx = self.encode(x);
        let gate = |w: &str, b: &str| -> Vec<f64> {
            let m = matvec_rows(&ctx, 1, d, self.w(w), c);
            m.iter().zip(self.w(b)).map(|(a, b)| a + b).collect()
        };
        let (cr, cz, cn) = (gate("ctx_wr", "gate_br"), gate("ctx_wz", "gate_bz"), gate("ctx_wn", "gate_bn"));
        let mut h: Vec<f64> = matvec_rows(&ctx, 1, d, self.w("init_w"), c)
            .iter()
            .zip(self.w("init_b"))
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut prev = self.bos;
        let mut out = Rollout {
            probs: Vec::new(),
            hiddens: Vec::new(),
        };
        for &tok in tokens {
            let e = &self.w("tok_embed")[prev * d..(prev + 1) * d];
            let er = matvec_rows(e, 1, d, self.w("emb_wr"), c);
            let ez = matvec_rows(e, 1, d, self.w("emb_wz"), c);
            let en = matvec_rows(e, 1, d, self.w("emb_wn"), c);
            let hr = matvec_rows(&h, 1, c, self.w("hid_wr"), c);
            let hz = matvec_rows(&h, 1, c, self.w("hid_wz"), c);
            let hn = matvec_rows(&h, 1, c, self.w("hid_wn"), c);
            let bn = self.w("hid_bn");
            let mut next = vec![0.0; c];
            for j in 0..c {
                let r = sigmoid(er[j] + cr[j] + hr[j]);
                let z = sigmoid(ez[j] + cz[j] + hz[j]);
                let n = (en[j] + cn[j] + r * (hn[j] + bn[j])).tanh();
                next[j] = n + z * (h[j] - n);
            }
            h = next;
            let logits: Vec<f64> = matvec_rows(&h, 1, c, self.w("out_w"), v)
                .iter()
                .zip(self.w("out_b"))
                .map(|(a, b)| a + b)
                .collect();
            out.probs.push(softmax(&logits));
            out.hiddens.push(h.clone());
            prev = tok;
        }
        out
    }

    /// `λ₁·L₁ + λ₂·L₂ + λ₃·L₃` along a fixed token path.
    pub fn objective(&self, x: &[f64], tokens: &[usize], lambda: [f64; 3]) -> f64 {
        let r = self.rollout(x, tokens);
        let n = tokens.len();
        let l1 = r.probs.iter().map(|p| p[self.eos]).sum::<f64>() / n as f64;
        let l2: f64 = r.probs.iter().map(|p| (self.v as f64).ln() - entropy(p)).sum();
        let flat: Vec<f64> = r.hiddens.concat();
        let l3 = -nuclear_oracle(n, self.c, &flat);
        lambda[0] * l1 + lambda[1] * l2 + lambda[2] * l3
    }
}
