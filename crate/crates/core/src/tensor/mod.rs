//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. [`Tensor`]
//! is a cheap `Copy` handle into it. Nodes are appended in evaluation order,
//! so a reverse walk over the tape is already a topological order and each
//! node is visited exactly once during [`Tensor::backward`].
//!
//! Tapes are meant to be short-lived: the attack loop builds a fresh one per
//! iteration because the generated sequence length changes every time.

mod io;
mod svd;

use std::cell::{Ref, RefCell};
use std::sync::Arc;

pub(crate) use io::{read_bytes as io_read_bytes, read_u32 as io_read_u32};
pub use io::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, TENSOR_MAGIC};
pub use svd::{svd_thin, SvdFactors, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    AddRow(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    XLogX(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        src: usize,
        index: Arc<[usize]>,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    NuclearNorm {
        a: usize,
        uvt: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return Err(Error::dim(
            op,
            format!("shape {shape:?} holds {} values, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn softmax_rows(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient during backward.
    pub fn leaf(&self, shape: &[usize], data: Vec<f32>) -> Result<Tensor<'_>> {
        check_len("leaf", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, shape: &[usize], data: Vec<f32>) -> Result<Tensor<'_>> {
        check_len("constant", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&self, value: f32) -> Tensor<'_> {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    /// Stacks tensors with equal trailing width into an `n×width` matrix.
    pub fn concat_rows<'t>(&'t self, parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let nodes = self.nodes.borrow();
        let width = *nodes[parts[0].id].shape.last().unwrap_or(&1);
        let mut rows = 0;
        let mut value = Vec::new();
        let mut requires_grad = false;
        for p in parts {
            let node = &nodes[p.id];
            let w = *node.shape.last().unwrap_or(&1);
            if w != width {
                return Err(Error::dim(
                    "concat_rows",
                    format!("width {w} does not match {width}"),
                ));
            }
            rows += node.value.len() / width;
            value.extend_from_slice(&node.value);
            requires_grad |= node.requires_grad;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(vec![rows, width], value, Op::ConcatRows(ids), requires_grad))
    }
}

impl<'t> Tensor<'t> {
    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    fn same_tape(&self, other: &Tensor<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "tensors belong to different tapes"
        );
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<f32> {
        self.node().value.clone()
    }

    /// Borrow the forward value. Do not hold the guard across op calls.
    pub fn data(&self) -> Ref<'t, [f32]> {
        Ref::map(self.node(), |n| n.value.as_slice())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let node = self.node();
        assert_eq!(node.value.len(), 1, "item() on non-scalar tensor");
        node.value[0]
    }

    fn unary(&self, f: impl Fn(f32) -> f32, op: Op) -> Tensor<'t> {
        let (shape, value, rg) = {
            let n = self.node();
            (
                n.shape.clone(),
                n.value.iter().map(|&v| f(v)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: &Tensor<'t>,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::dim(
                    name,
                    format!("{:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f32) -> Tensor<'t> {
        self.unary(|v| v * factor, Op::Scale(self.id, factor))
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor<'t> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// Adds `bias` (length = last dimension) to every row.
    pub fn add_row(&self, bias: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(bias);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let width = *a.shape.last().unwrap_or(&1);
            if b.value.len() != width {
                return Err(Error::dim(
                    "add_row",
                    format!("bias {:?} against rows of width {width}", b.shape),
                ));
            }
            let mut value = a.value.clone();
            for row in value.chunks_exact_mut(width) {
                for (v, &c) in row.iter_mut().zip(&b.value) {
                    *v += c;
                }
            }
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::AddRow(self.id, bias.id), rg))
    }

    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (m, k, n, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::dim(
                    "matmul",
                    format!("{:?} x {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut value = vec![0.0; m * n];
            gemm_acc(&a.value, &b.value, &mut value, m, k, n);
            (m, k, n, value, a.requires_grad || b.requires_grad)
        };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
        };
        Ok(self.tape.push(vec![m, n], value, op, rg))
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.unary(f32::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn log(&self) -> Tensor<'t> {
        self.unary(f32::ln, Op::Log(self.id))
    }

    /// Elementwise `x·ln x` with `0·ln 0 := 0`.
    pub fn xlogx(&self) -> Tensor<'t> {
        self.unary(
            |v| if v > 0.0 { v * v.ln() } else { 0.0 },
            Op::XLogX(self.id),
        )
    }

    pub fn sum(&self) -> Tensor<'t> {
        self.sum_plus(0.0)
    }

    /// `Σ self + c`, accumulated in f64 and rounded once, so a large
    /// constant offset does not cost the precision of a separate add.
    pub fn sum_plus(&self, c: f64) -> Tensor<'t> {
        let (v, rg) = {
            let n = self.node();
            let s = n.value.iter().map(|&x| x as f64).sum::<f64>() + c;
            (s as f32, n.requires_grad)
        };
        self.tape.push(vec![], vec![v], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Tensor<'t> {
        let (v, rg) = {
            let n = self.node();
            let s = n.value.iter().map(|&x| x as f64).sum::<f64>();
            ((s / n.value.len() as f64) as f32, n.requires_grad)
        };
        self.tape.push(vec![], vec![v], Op::Mean(self.id), rg)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&self) -> Tensor<'t> {
        let (shape, value, rg) = {
            let n = self.node();
            let width = *n.shape.last().unwrap_or(&1);
            (n.shape.clone(), softmax_rows(&n.value, width), n.requires_grad)
        };
        self.tape.push(shape, value, Op::Softmax(self.id), rg)
    }

    pub fn log_softmax(&self) -> Tensor<'t> {
        let (shape, value, rg) = {
            let n = self.node();
            let width = *n.shape.last().unwrap_or(&1);
            (n.shape.clone(), log_softmax_rows(&n.value, width), n.requires_grad)
        };
        self.tape.push(shape, value, Op::LogSoftmax(self.id), rg)
    }

    /// Normalizes each row over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<'t>, beta: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (shape, value, xhat, rstd, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let width = *x.shape.last().unwrap_or(&1);
            if g.value.len() != width || b.value.len() != width {
                return Err(Error::dim(
                    "layer_norm",
                    format!("gamma {:?} / beta {:?} vs width {width}", g.shape, b.shape),
                ));
            }
            let rows = x.value.len() / width;
            let mut xhat = vec![0.0; x.value.len()];
            let mut rstd = vec![0.0; rows];
            let mut value = vec![0.0; x.value.len()];
            for r in 0..rows {
                let row = &x.value[r * width..(r + 1) * width];
                let mu = row.iter().sum::<f32>() / width as f32;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / width as f32;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..width {
                    let h = (row[j] - mu) * rs;
                    xhat[r * width + j] = h;
                    value[r * width + j] = h * g.value[j] + b.value[j];
                }
            }
            let rg = x.requires_grad || g.requires_grad || b.requires_grad;
            (x.shape.clone(), value, xhat, rstd, rg)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Tensor<'t>> {
        check_len("gather", shape, index.len())?;
        let (value, rg) = {
            let n = self.node();
            let len = n.value.len();
            if let Some(&bad) = index.iter().find(|&&i| i >= len) {
                return Err(Error::dim(
                    "gather",
                    format!("index {bad} out of range for {len} values"),
                ));
            }
            (index.iter().map(|&i| n.value[i]).collect(), n.requires_grad)
        };
        let op = Op::Gather {
            src: self.id,
            index,
        };
        Ok(self.tape.push(shape.to_vec(), value, op, rg))
    }

    /// Row lookup into a `V×d` table; returns `ids.len()×d`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dim("embedding_lookup", format!("table {shape:?}")));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "embedding_lookup",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let index: Arc<[usize]> = ids
            .iter()
            .flat_map(|&i| i * width..(i + 1) * width)
            .collect();
        self.gather(index, &[ids.len(), width])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let n = self.node();
            check_len("reshape", shape, n.value.len())?;
            (n.value.clone(), n.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Sum of singular values of a 2-D tensor. The backward pass uses the
    /// thin-SVD subgradient `U·Vᵀ`.
    pub fn nuclear_norm(&self) -> Result<Tensor<'t>> {
        let (value, uvt, rg) = {
            let n = self.node();
            if n.shape.len() != 2 || n.shape[0] == 0 || n.shape[1] == 0 {
                return Err(Error::dim("nuclear_norm", format!("{:?}", n.shape)));
            }
            let (rows, cols) = (n.shape[0], n.shape[1]);
            let f = svd_thin(rows, cols, &n.value)?;
            let value = f.s.iter().sum::<f64>() as f32;
            let uvt = if n.requires_grad {
                f.u_vt().into_iter().map(|v| v as f32).collect()
            } else {
                Vec::new()
            };
            (value, uvt, n.requires_grad)
        };
        let op = Op::NuclearNorm { a: self.id, uvt };
        Ok(self.tape.push(vec![], vec![value], op, rg))
    }

    /// Reverse sweep from a single-element tensor.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.id + 1];
        if root.requires_grad {
            grads[self.id] = Some(vec![1.0]);
        }
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    id: usize,
    fill: impl FnOnce(&mut [f32]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    fill(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, f) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| {
                let width = s.len();
                for row in g.chunks_exact(width) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            // dA = G·Bᵀ
            accumulate(nodes, grads, *a, |s| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
                    }
                }
            });
            // dB = Aᵀ·G
            accumulate(nodes, grads, *b, |s| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let srow = &mut s[p * n..(p + 1) * n];
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += aip * g);
                    }
                }
            });
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Log(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / x[i];
                }
            })
        }
        Op::XLogX(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (x[i].max(f32::MIN_POSITIVE).ln() + 1.0);
                }
            })
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::Mean(a) => accumulate(nodes, grads, *a, |s| {
            let d = g[0] / s.len() as f32;
            s.iter_mut().for_each(|s| *s += d)
        }),
        Op::Softmax(a) => {
            let width = *node.shape.last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |s| {
                for ((srow, yrow), grow) in s
                    .chunks_exact_mut(width)
                    .zip(y.chunks_exact(width))
                    .zip(g.chunks_exact(width))
                {
                    let dot: f32 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        srow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let width = *node.shape.last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |s| {
                for ((srow, yrow), grow) in s
                    .chunks_exact_mut(width)
                    .zip(y.chunks_exact(width))
                    .zip(g.chunks_exact(width))
                {
                    let total: f32 = grow.iter().sum();
                    for j in 0..width {
                        srow[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gamma].value;
            let width = gv.len();
            accumulate(nodes, grads, *x, |s| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * width;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..width {
                        let d = g[base + j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xhat[base + j];
                    }
                    let w = width as f32;
                    for j in 0..width {
                        let d = g[base + j] * gv[j];
                        s[base + j] += rs / w * (w * d - sum_d - xhat[base + j] * sum_dx);
                    }
                }
            });
            accumulate(nodes, grads, *gamma, |s| {
                for (grow, hrow) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                    for j in 0..width {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            });
            accumulate(nodes, grads, *beta, |s| {
                for grow in g.chunks_exact(width) {
                    s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::Gather { src, index } => accumulate(nodes, grads, *src, |s| {
            for (&i, &gv) in index.iter().zip(g) {
                s[i] += gv;
            }
        }),
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = nodes[id].value.len();
                let part = &g[offset..offset + len];
                accumulate(nodes, grads, id, |s| {
                    s.iter_mut().zip(part).for_each(|(s, g)| *s += g)
                });
                offset += len;
            }
        }
        Op::NuclearNorm { a, uvt } => accumulate(nodes, grads, *a, |s| {
            s.iter_mut().zip(uvt).for_each(|(s, d)| *s += g[0] * d)
        }),
    }
}

/// Result of a backward sweep, indexed by tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// `None` when the tensor does not require grad or is unreachable from the loss.
    pub fn get(&self, t: &Tensor<'_>) -> Option<&[f32]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Gradient, or zeros with the tensor's size when nothing flowed into it.
    pub fn get_or_zeros(&self, t: &Tensor<'_>) -> Vec<f32> {
        self.get(t)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
