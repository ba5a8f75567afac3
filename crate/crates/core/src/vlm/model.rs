//! The toy captioner: patch encoder, pooled MLP context, GRU decoder.
//!
//! Encoder: `16` non-overlapping `8×8` patches → linear + position → ReLU →
//! mean pool → layer norm → residual tanh MLP → context `ctx`.
//! Decoder: a GRU cell whose input is the previous token embedding; `ctx`
//! enters every gate at every step and seeds the initial hidden state.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmDims {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub enc_hidden: usize,
    /// Decoder hidden width `C`; the row width of the stacked hidden matrix.
    pub hidden: usize,
    pub vocab: usize,
}

impl VlmDims {
    pub fn standard(vocab: usize) -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            d_model: 64,
            enc_hidden: 128,
            hidden: 64,
            vocab,
        }
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Format(format!(
                "patch {} does not tile image {}",
                self.patch, self.image_size
            )));
        }
        if [self.channels, self.d_model, self.enc_hidden, self.hidden, self.vocab].contains(&0) {
            return Err(Error::Format("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    fn glorot(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        }
    }
}

macro_rules! param_set {
    ($($name:ident),* $(,)?) => {
        /// Every trainable tensor of the model, in checkpoint order.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Params {
            $(pub $name: Param,)*
        }

        /// [`Params`] placed on a tape.
        #[derive(Debug, Clone, Copy)]
        pub struct BoundParams<'t> {
            $(pub $name: Tensor<'t>,)*
        }

        impl Params {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name),)*];

            pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Param)> {
                [$((stringify!($name), &self.$name),)*].into_iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Param)> {
                [$((stringify!($name), &mut self.$name),)*].into_iter()
            }

            fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
                let put = |p: &Param| {
                    if trainable {
                        tape.leaf(&p.shape, p.data.clone())
                    } else {
                        tape.constant(&p.shape, p.data.clone())
                    }
                    .expect("parameter shape is consistent")
                };
                BoundParams { $($name: put(&self.$name),)* }
            }
        }

        impl<'t> BoundParams<'t> {
            pub fn iter(&self) -> impl Iterator<Item = (&'static str, Tensor<'t>)> {
                [$((stringify!($name), self.$name),)*].into_iter()
            }
        }
    };
}

param_set!(
    patch_w, patch_b, pos_embed, ln_gamma, ln_beta, enc_w1, enc_b1, enc_w2, enc_b2, init_w,
    init_b, tok_embed, ctx_wr, ctx_wz, ctx_wn, gate_br, gate_bz, gate_bn, emb_wr, emb_wz, emb_wn,
    hid_wr, hid_wz, hid_wn, hid_bn, out_w, out_b,
);

impl Params {
    fn shapes(d: &VlmDims) -> Vec<Vec<usize>> {
        let (dm, c, v, eh) = (d.d_model, d.hidden, d.vocab, d.enc_hidden);
        vec![
            vec![d.patch_dim(), dm],
            vec![dm],
            vec![d.patches(), dm],
            vec![dm],
            vec![dm],
            vec![dm, eh],
            vec![eh],
            vec![eh, dm],
            vec![dm],
            vec![dm, c],
            vec![c],
            vec![v, dm],
            vec![dm, c],
            vec![dm, c],
            vec![dm, c],
            vec![c],
            vec![c],
            vec![c],
            vec![dm, c],
            vec![dm, c],
            vec![dm, c],
            vec![c, c],
            vec![c, c],
            vec![c, c],
            vec![c],
            vec![c, v],
            vec![v],
        ]
    }

    fn init(d: &VlmDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Self::shapes(d);
        let mut g = |i: usize| Param::glorot(&s[i], &mut rng);
        let patch_w = g(0);
        let pos_embed = g(2);
        let enc_w1 = g(5);
        let enc_w2 = g(7);
        let init_w = g(9);
        let tok_embed = g(11);
        let ctx_wr = g(12);
        let ctx_wz = g(13);
        let ctx_wn = g(14);
        let emb_wr = g(18);
        let emb_wz = g(19);
        let emb_wn = g(20);
        let hid_wr = g(21);
        let hid_wz = g(22);
        let hid_wn = g(23);
        let out_w = g(25);
        Self {
            patch_w,
            patch_b: Param::zeros(&s[1]),
            pos_embed,
            ln_gamma: Param::filled(&s[3], 1.0),
            ln_beta: Param::zeros(&s[4]),
            enc_w1,
            enc_b1: Param::zeros(&s[6]),
            enc_w2,
            enc_b2: Param::zeros(&s[8]),
            init_w,
            init_b: Param::zeros(&s[10]),
            tok_embed,
            ctx_wr,
            ctx_wz,
            ctx_wn,
            gate_br: Param::zeros(&s[15]),
            gate_bz: Param::zeros(&s[16]),
            gate_bn: Param::zeros(&s[17]),
            emb_wr,
            emb_wz,
            emb_wn,
            hid_wr,
            hid_wz,
            hid_wn,
            hid_bn: Param::zeros(&s[24]),
            out_w,
            out_b: Param::zeros(&s[26]),
        }
    }

    pub(crate) fn check_shapes(&self, d: &VlmDims) -> Result<()> {
        for ((name, p), want) in self.iter().zip(Self::shapes(d)) {
            if p.shape != want {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?}, expected {want:?}",
                    p.shape
                )));
            }
            if p.data.len() != want.iter().product::<usize>() {
                return Err(Error::Format(format!("parameter {name}: wrong value count")));
            }
        }
        Ok(())
    }

    pub(crate) fn from_named(mut named: Vec<(String, Param)>) -> Result<Self> {
        if named.len() != Self::NAMES.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                Self::NAMES.len(),
                named.len()
            )));
        }
        for (i, (name, _)) in named.iter().enumerate() {
            if name != Self::NAMES[i] {
                return Err(Error::Format(format!(
                    "parameter {i} is {name:?}, expected {:?}",
                    Self::NAMES[i]
                )));
            }
        }
        let mut it = named.drain(..).map(|(_, p)| p);
        let mut next = || it.next().expect("count checked");
        Ok(Self {
            patch_w: next(),
            patch_b: next(),
            pos_embed: next(),
            ln_gamma: next(),
            ln_beta: next(),
            enc_w1: next(),
            enc_b1: next(),
            enc_w2: next(),
            enc_b2: next(),
            init_w: next(),
            init_b: next(),
            tok_embed: next(),
            ctx_wr: next(),
            ctx_wz: next(),
            ctx_wn: next(),
            gate_br: next(),
            gate_bz: next(),
            gate_bn: next(),
            emb_wr: next(),
            emb_wz: next(),
            emb_wn: next(),
            hid_wr: next(),
            hid_wz: next(),
            hid_wn: next(),
            hid_bn: next(),
            out_w: next(),
            out_b: next(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    pub dims: VlmDims,
    pub vocab: Vocab,
    pub params: Params,
    patch_index: Arc<[usize]>,
}

/// Encoder output for a batch of `B` images.
#[derive(Debug, Clone)]
pub struct Encoding<'t> {
    /// `B×d_model`
    pub ctx: Tensor<'t>,
    /// Post-nonlinearity encoder activations (patch features, MLP hidden).
    pub activations: Vec<Tensor<'t>>,
}

/// Per-sequence projections of `ctx` reused at every decoder step.
#[derive(Debug, Clone, Copy)]
pub struct DecoderContext<'t> {
    pub r: Tensor<'t>,
    pub z: Tensor<'t>,
    pub n: Tensor<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput<'t> {
    /// New hidden state `B×C` (the `g_i` of the step).
    pub hidden: Tensor<'t>,
    /// `B×V`
    pub logits: Tensor<'t>,
    /// `B×V`, softmax of `logits`.
    pub probs: Tensor<'t>,
}

/// A model's parameters on a tape plus the model it came from.
#[derive(Debug, Clone, Copy)]
pub struct BoundVlm<'m, 't> {
    pub model: &'m ToyVlm,
    pub tape: &'t Tape,
    pub p: BoundParams<'t>,
}

fn patch_index(d: &VlmDims) -> Arc<[usize]> {
    let per_side = d.image_size / d.patch;
    let mut idx = Vec::with_capacity(d.pixels());
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..d.channels {
                for dy in 0..d.patch {
                    for dx in 0..d.patch {
                        let y = py * d.patch + dy;
                        let x = px * d.patch + dx;
                        idx.push(c * d.image_size * d.image_size + y * d.image_size + x);
                    }
                }
            }
        }
    }
    idx.into()
}

impl ToyVlm {
    pub fn new(dims: VlmDims, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = Params::init(&dims, seed);
        Self::from_parts(dims, vocab, params)
    }

    /// The standard 32-token vocabulary and default dimensions.
    pub fn standard(seed: u64) -> Self {
        let vocab = Vocab::standard();
        Self::new(VlmDims::standard(vocab.len()), vocab, seed).expect("standard dims are valid")
    }

    pub fn from_parts(dims: VlmDims, vocab: Vocab, params: Params) -> Result<Self> {
        dims.validate()?;
        if vocab.len() != dims.vocab {
            return Err(Error::Format(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                dims.vocab
            )));
        }
        params.check_shapes(&dims)?;
        Ok(Self {
            patch_index: patch_index(&dims),
            dims,
            vocab,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }

    /// Places the parameters on `tape`. With `trainable` they become
    /// gradient-receiving leaves, otherwise constants.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape, trainable: bool) -> BoundVlm<'m, 't> {
        BoundVlm {
            model: self,
            tape,
            p: self.params.bind(tape, trainable),
        }
    }

    pub fn check_image(&self, x: &Image) -> Result<()> {
        let d = &self.dims;
        if x.shape() != [d.channels, d.image_size, d.image_size] {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "image {:?}, model expects {:?}",
                    x.shape(),
                    [d.channels, d.image_size, d.image_size]
                ),
            ));
        }
        Ok(())
    }
}

impl<'m, 't> BoundVlm<'m, 't> {
    pub fn dims(&self) -> &'m VlmDims {
        &self.model.dims
    }

    /// Image leaf (or constant) suitable for [`Self::encode`].
    pub fn image_input(&self, x: &Image, requires_grad: bool) -> Result<Tensor<'t>> {
        self.model.check_image(x)?;
        if requires_grad {
            self.tape.leaf(&x.shape(), x.data.clone())
        } else {
            self.tape.constant(&x.shape(), x.data.clone())
        }
    }

    /// Encodes `B` images given as a tensor of `B·C·H·W` pixels.
    pub fn encode(&self, pixels: &Tensor<'t>) -> Result<Encoding<'t>> {
        let d = self.dims();
        let total = pixels.numel();
        if total == 0 || total % d.pixels() != 0 {
            return Err(Error::dim(
                "encode_image",
                format!("{total} pixels is not a multiple of {}", d.pixels()),
            ));
        }
        let batch = total / d.pixels();
        let np = d.patches();
        let index: Arc<[usize]> = if batch == 1 {
            self.model.patch_index.clone()
        } else {
            (0..batch)
                .flat_map(|b| self.model.patch_index.iter().map(move |&i| b * d.pixels() + i))
                .collect()
        };
        let patches = pixels.gather(index, &[batch * np, d.patch_dim()])?;
        let pos = if batch == 1 {
            self.p.pos_embed
        } else {
            let idx: Arc<[usize]> = (0..batch).flat_map(|_| 0..np * d.d_model).collect();
            self.p.pos_embed.gather(idx, &[batch * np, d.d_model])?
        };
        let feats = patches
            .matmul(&self.p.patch_w)?
            .add_row(&self.p.patch_b)?
            .add(&pos)?
            .relu();
        let mut pool = vec![0.0; batch * batch * np];
        for b in 0..batch {
            for j in 0..np {
                pool[b * batch * np + b * np + j] = 1.0 / np as f32;
            }
        }
        let pooled = self
            .tape
            .constant(&[batch, batch * np], pool)?
            .matmul(&feats)?;
        let normed = pooled.layer_norm(&self.p.ln_gamma, &self.p.ln_beta)?;
        let hidden = normed.matmul(&self.p.enc_w1)?.add_row(&self.p.enc_b1)?.tanh();
        let ctx = hidden
            .matmul(&self.p.enc_w2)?
            .add_row(&self.p.enc_b2)?
            .add(&normed)?;
        Ok(Encoding {
            ctx,
            activations: vec![feats, hidden],
        })
    }

    pub fn encode_image(&self, x: &Tensor<'t>) -> Result<Encoding<'t>> {
        self.encode(x)
    }

    pub fn decoder_context(&self, ctx: &Tensor<'t>) -> Result<DecoderContext<'t>> {
        Ok(DecoderContext {
            r: ctx.matmul(&self.p.ctx_wr)?.add_row(&self.p.gate_br)?,
            z: ctx.matmul(&self.p.ctx_wz)?.add_row(&self.p.gate_bz)?,
            n: ctx.matmul(&self.p.ctx_wn)?.add_row(&self.p.gate_bn)?,
        })
    }

    pub fn initial_hidden(&self, ctx: &Tensor<'t>) -> Result<Tensor<'t>> {
        Ok(ctx.matmul(&self.p.init_w)?.add_row(&self.p.init_b)?.tanh())
    }

    /// One GRU step for a batch of rows; `tokens[b]` is the previous token of row `b`.
    pub fn step(
        &self,
        dc: &DecoderContext<'t>,
        h_prev: &Tensor<'t>,
        tokens: &[usize],
    ) -> Result<StepOutput<'t>> {
        let v = self.dims().vocab;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::dim("decoder_step", format!("token {bad} >= vocab {v}")));
        }
        let p = &self.p;
        let e = p.tok_embed.embedding_lookup(tokens)?;
        let r = e
            .matmul(&p.emb_wr)?
            .add(&dc.r)?
            .add(&h_prev.matmul(&p.hid_wr)?)?
            .sigmoid();
        let z = e
            .matmul(&p.emb_wz)?
            .add(&dc.z)?
            .add(&h_prev.matmul(&p.hid_wz)?)?
            .sigmoid();
        let hn = h_prev.matmul(&p.hid_wn)?.add_row(&p.hid_bn)?;
        let n = e.matmul(&p.emb_wn)?.add(&dc.n)?.add(&r.mul(&hn)?)?.tanh();
        let hidden = n.add(&z.mul(&h_prev.sub(&n)?)?)?;
        let logits = hidden.matmul(&p.out_w)?.add_row(&p.out_b)?;
        let probs = logits.softmax();
        Ok(StepOutput {
            hidden,
            logits,
            probs,
        })
    }

    /// Single step from an explicit context, recomputing the gate projections.
    pub fn decoder_step(
        &self,
        h_prev: &Tensor<'t>,
        token: usize,
        ctx: &Tensor<'t>,
    ) -> Result<StepOutput<'t>> {
        let dc = self.decoder_context(ctx)?;
        self.step(&dc, h_prev, &[token])
    }
}
