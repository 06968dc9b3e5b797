//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already a topological order and `backward` is a single reverse sweep.
//! Values are immutable once recorded. Gradients of leaves persist across
//! `backward` calls and accumulate until [`Tape::zero_grad`].
//!
//! The op set is the one a pre-norm ViT needs: matmul, bias add, layer norm,
//! tanh-GELU, fused multi-head softmax attention, row gather/concat/broadcast
//! for token shuffling, and a few elementwise ops and reductions for losses.

use super::kernels::{gemm, Trans};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    Attention { q: Var, k: Var, v: Var, scale: f64 },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    BroadcastRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads(..) => "merge_heads",
            Op::Attention { .. } => "softmax_attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// Forward intermediates kept for the backward rule
    /// (normalised activations, attention weights, ...).
    aux: Vec<f64>,
    needs_grad: bool,
    /// Persistent gradient, leaves only.
    grad: Option<Vec<f64>>,
}

/// Computation graph recorder.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Tape {
    /// Finite-value checking defaults to on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle NaN/Inf detection on every recorded op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copy a recorded value out as a plain tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Gradient accumulated on a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, aux: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} produced NaN or Inf",
                op.name()
            )));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            op => self.inputs(op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            aux,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gelu(a)
            | Op::MergeHeads(a)
            | Op::BroadcastRows(a) => vec![a],
            Op::SplitHeads { x, .. } | Op::GatherRows { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }

    /// Record a leaf. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            aux: Vec::new(),
            needs_grad: t.requires_grad(),
            grad: None,
        });
        Var(id)
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => bail!(Dimension, "{what} expects a matrix, got shape {:?}", s),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            );
        }
        Ok(())
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions {k} and {k2} disagree");
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Trans::No,
            &self.nodes[b.0].value,
            Trans::No,
            &mut out,
            0.0,
        );
        self.push(vec![m, n], out, Op::MatMul(a, b), Vec::new())
    }

    /// Add a length-`n` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.nodes[x.0]
            .shape
            .last()
            .ok_or_else(|| Error::Dimension("add_bias on a scalar".into()))?;
        if self.nodes[b.0].value.len() != n {
            bail!(
                Dimension,
                "bias of length {} for rows of length {n}",
                self.nodes[b.0].value.len()
            );
        }
        let bias = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(n) {
            add_into(row, bias);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::AddBias(x, b), Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Add(a, b), Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Sub(a, b), Vec::new())
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Mul(a, b), Vec::new())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Scale(a, s), Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            bail!(Dimension, "mean of an empty tensor");
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean(a), Vec::new())
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Gelu(a), Vec::new())
    }

    /// Normalise each length-`d` row to zero mean and unit (population)
    /// variance, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.nodes[x.0]
            .shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm on a scalar".into()))?;
        if d == 0 {
            bail!(Dimension, "layer_norm over an empty last dimension");
        }
        if self.nodes[gamma.0].value.len() != d || self.nodes[beta.0].value.len() != d {
            bail!(
                Dimension,
                "layer_norm affine parameters must have length {d}"
            );
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        // aux = [xhat (rows·d), inv_std (rows)]
        let mut aux = vec![0.0; xv.len() + rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            aux[xv.len() + r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                aux[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::LayerNorm { x, gamma, beta }, aux)
    }

    /// `[t×(h·dh)] → [h×t×dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(x, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            bail!(Dimension, "width {d} is not divisible by {heads} heads");
        }
        let dh = d / heads;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for h in 0..heads {
            for i in 0..t {
                out[(h * t + i) * dh..(h * t + i + 1) * dh]
                    .copy_from_slice(&xv[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        self.push(vec![heads, t, dh], out, Op::SplitHeads { x, heads }, Vec::new())
    }

    /// `[h×t×dh] → [t×(h·dh)]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (h, t, dh) = match self.nodes[x.0].shape.as_slice() {
            [h, t, dh] => (*h, *t, *dh),
            s => bail!(Dimension, "merge_heads expects [h, t, dh], got {:?}", s),
        };
        let d = h * dh;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for hh in 0..h {
            for i in 0..t {
                out[i * d + hh * dh..i * d + (hh + 1) * dh]
                    .copy_from_slice(&xv[(hh * t + i) * dh..(hh * t + i + 1) * dh]);
            }
        }
        self.push(vec![t, d], out, Op::MergeHeads(x), Vec::new())
    }

    /// Per-head `softmax(q·kᵀ·scale)·v` for `[h×t×dh]` inputs.
    ///
    /// `scale` must equal `1/√dh`.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (h, t, dh) = match self.nodes[q.0].shape.as_slice() {
            [h, t, dh] => (*h, *t, *dh),
            s => bail!(Dimension, "attention expects [h, t, dh], got {:?}", s),
        };
        if self.nodes[k.0].shape != self.nodes[q.0].shape
            || self.nodes[v.0].shape != self.nodes[q.0].shape
        {
            bail!(
                Dimension,
                "attention head shapes differ: q {:?}, k {:?}, v {:?}",
                self.nodes[q.0].shape,
                self.nodes[k.0].shape,
                self.nodes[v.0].shape
            );
        }
        if dh == 0 {
            bail!(Dimension, "attention with empty head dimension");
        }
        let expected = 1.0 / (dh as f64).sqrt();
        if (scale - expected).abs() > 1e-12 * expected {
            bail!(Contract, "attention scale {scale} must be 1/sqrt({dh}) = {expected}");
        }
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut probs = vec![0.0; h * t * t];
        let mut out = vec![0.0; h * t * dh];
        for hh in 0..h {
            let qs = &qv[hh * t * dh..(hh + 1) * t * dh];
            let ks = &kv[hh * t * dh..(hh + 1) * t * dh];
            let vs = &vv[hh * t * dh..(hh + 1) * t * dh];
            let p = &mut probs[hh * t * t..(hh + 1) * t * t];
            gemm(t, dh, t, qs, Trans::No, ks, Trans::Yes, p, 0.0);
            for row in p.chunks_mut(t) {
                let mut mx = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let inv = 1.0 / z;
                row.iter_mut().for_each(|s| *s *= inv);
            }
            gemm(
                t,
                t,
                dh,
                p,
                Trans::No,
                vs,
                Trans::No,
                &mut out[hh * t * dh..(hh + 1) * t * dh],
                0.0,
            );
        }
        self.push(vec![h, t, dh], out, Op::Attention { q, k, v, scale }, probs)
    }

    /// Attention weights recorded by a `softmax_attention` node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    /// Select rows of `[n×d]` by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            bail!(Dimension, "row index {bad} out of range for {n} rows");
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Vec::new(),
        )
    }

    /// Stack `[a×d]` on top of `[b×d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.dims2(a, "concat_rows")?;
        let (rb, db) = self.dims2(b, "concat_rows")?;
        if da != db {
            bail!(Dimension, "concat_rows widths {da} and {db} differ");
        }
        let mut out = self.nodes[a.0].value.clone();
        out.extend_from_slice(&self.nodes[b.0].value);
        self.push(vec![ra + rb, da], out, Op::ConcatRows(a, b), Vec::new())
    }

    /// Repeat a single row (`[d]` or `[1×d]`) `count` times.
    pub fn broadcast_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let d = match self.nodes[x.0].shape.as_slice() {
            [d] | [1, d] => *d,
            s => bail!(Dimension, "broadcast_rows expects one row, got {:?}", s),
        };
        let row = self.nodes[x.0].value.clone();
        let mut out = Vec::with_capacity(count * d);
        for _ in 0..count {
            out.extend_from_slice(&row);
        }
        self.push(vec![count, d], out, Op::BroadcastRows(x), Vec::new())
    }

    /// Back-propagate from a scalar `loss`, adding d(loss)/d(leaf) into every
    /// reachable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            );
        }
        if !self.nodes[loss.0].needs_grad {
            bail!(Contract, "loss does not depend on any tensor requiring grad");
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.nodes[id].grad {
                    Some(buf) => add_into(buf, &g),
                    None => self.nodes[id].grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, grad: Vec<f64>| match &mut adj[v.0] {
            Some(buf) => add_into(buf, &grad),
            slot @ None => *slot = Some(grad),
        };
        match node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, Trans::No, &self.nodes[b.0].value, Trans::Yes, &mut da, 0.0);
                    send(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.nodes[a.0].value, Trans::Yes, g, Trans::No, &mut db, 0.0);
                    send(b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(b) {
                    let n = self.nodes[b.0].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    send(b, db);
                }
                if self.wants(x) {
                    send(x, g.to_vec());
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    send(a, g.to_vec());
                }
                if self.wants(b) {
                    send(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    send(a, g.to_vec());
                }
                if self.wants(b) {
                    send(b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = &self.nodes[b.0].value;
                    send(a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    let av = &self.nodes[a.0].value;
                    send(b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => send(a, g.iter().map(|x| x * s).collect()),
            Op::Sum(a) => send(a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                send(a, vec![g[0] / n as f64; n]);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                send(a, g.iter().zip(av).map(|(gi, &x)| gi * gelu_derivative(x)).collect());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = self.nodes[gamma.0].value.len();
                let rows = g.len() / d;
                let xhat = &node.aux[..g.len()];
                let inv = &node.aux[g.len()..];
                if self.wants(gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    send(gamma, dg);
                }
                if self.wants(beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        add_into(&mut db, gr);
                    }
                    send(beta, db);
                }
                if self.wants(x) {
                    let gam = &self.nodes[gamma.0].value;
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            dx[r * d + j] = inv[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    send(x, dx);
                }
            }
            Op::SplitHeads { x, heads } => {
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dh = d / heads;
                let mut dx = vec![0.0; g.len()];
                for h in 0..heads {
                    for i in 0..t {
                        dx[i * d + h * dh..i * d + (h + 1) * dh]
                            .copy_from_slice(&g[(h * t + i) * dh..(h * t + i + 1) * dh]);
                    }
                }
                send(x, dx);
            }
            Op::MergeHeads(x) => {
                let (h, t, dh) = (
                    self.nodes[x.0].shape[0],
                    self.nodes[x.0].shape[1],
                    self.nodes[x.0].shape[2],
                );
                let d = h * dh;
                let mut dx = vec![0.0; g.len()];
                for hh in 0..h {
                    for i in 0..t {
                        dx[(hh * t + i) * dh..(hh * t + i + 1) * dh]
                            .copy_from_slice(&g[i * d + hh * dh..i * d + (hh + 1) * dh]);
                    }
                }
                send(x, dx);
            }
            Op::Attention { q, k, v, scale } => {
                let (h, t, dh) = (
                    self.nodes[q.0].shape[0],
                    self.nodes[q.0].shape[1],
                    self.nodes[q.0].shape[2],
                );
                let probs = &node.aux;
                let (qv, kv, vv) = (
                    &self.nodes[q.0].value,
                    &self.nodes[k.0].value,
                    &self.nodes[v.0].value,
                );
                let mut dq = vec![0.0; h * t * dh];
                let mut dk = vec![0.0; h * t * dh];
                let mut dv = vec![0.0; h * t * dh];
                let mut dp = vec![0.0; t * t];
                for hh in 0..h {
                    let blk = hh * t * dh..(hh + 1) * t * dh;
                    let p = &probs[hh * t * t..(hh + 1) * t * t];
                    let go = &g[blk.clone()];
                    // dV = Pᵀ·dO
                    gemm(t, t, dh, p, Trans::Yes, go, Trans::No, &mut dv[blk.clone()], 0.0);
                    // dP = dO·Vᵀ
                    gemm(t, dh, t, go, Trans::No, &vv[blk.clone()], Trans::Yes, &mut dp, 0.0);
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the scale
                    for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (dv_, pv) in dr.iter_mut().zip(pr) {
                            *dv_ = pv * (*dv_ - dot) * scale;
                        }
                    }
                    gemm(t, t, dh, &dp, Trans::No, &kv[blk.clone()], Trans::No, &mut dq[blk.clone()], 0.0);
                    gemm(t, t, dh, &dp, Trans::Yes, &qv[blk.clone()], Trans::No, &mut dk[blk.clone()], 0.0);
                }
                if self.wants(q) {
                    send(q, dq);
                }
                if self.wants(k) {
                    send(k, dk);
                }
                if self.wants(v) {
                    send(v, dv);
                }
            }
            Op::GatherRows { x, ref idx } => {
                let d = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
                send(x, dx);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                if self.wants(a) {
                    send(a, g[..na].to_vec());
                }
                if self.wants(b) {
                    send(b, g[na..].to_vec());
                }
            }
            Op::BroadcastRows(x) => {
                let d = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; d];
                for row in g.chunks(d) {
                    add_into(&mut dx, row);
                }
                send(x, dx);
            }
        }
    }
}
