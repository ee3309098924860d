//! A small reverse-mode tape over real tensors.
//!
//! Complex values never appear here: the model keeps every complex quantity
//! as two real nodes (its planes), so a Hermitian product is four real
//! matmuls and the concatenated attention is an ordinary real attention.
//! Quantizers enter through [`Tape::straight_through`], whose forward value
//! is supplied by the caller and whose backward is the identity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a batched multi-head attention over `[batch * seq, heads * width]`
/// row-major inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
    pub scale: f64,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Relu2(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    HeadConcat { re: Var, im: Var, heads: usize },
    HeadSplit { x: Var, heads: usize, second: bool },
    Attention { q: Var, k: Var, v: Var, dims: AttentionDims, probs: Vec<f64> },
    StraightThrough(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require grad.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a * b`, or `a * b^T` when `trans_b`. Both operands are viewed as
    /// matrices (`rows x cols`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = mat_dims(self.value(a));
        let (br, bc) = mat_dims(self.value(b));
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().expect("matmul operand has at least one axis") = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("elementwise", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::shape("mul_const", format!("{} vs {}", ta.len(), c.len())));
        }
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    /// `max(0, x)^2`.
    pub fn relu2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| crate::tensor::relu2_scalar(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a);
        self.push(value, Op::Relu2(a), rg)
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d {
            return Err(Error::shape(
                "rmsnorm",
                format!("feature dim {d}, gain length {}", self.value(gain).len()),
            ));
        }
        let tx = self.value(x);
        let g = self.value(gain).data();
        let mut out = vec![0.0; tx.len()];
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for (row, orow) in tx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let denom = (ms + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_rms.push(inv);
            for ((o, &v), &gj) in orow.iter_mut().zip(row).zip(g) {
                *o = v * inv * gj;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[a | b]` along the trailing axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = mat_dims(self.value(a));
        let (rb, cb) = mat_dims(self.value(b));
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("rows {ra} vs {rb}")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Per-head concatenation: `[N, H*dh]` planes become `[N, H*2dh]` whose
    /// head `h` block is `[re_h | im_h]`.
    pub fn head_concat(&mut self, re: Var, im: Var, heads: usize) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(re));
        if self.value(im).shape() != self.value(re).shape() || heads == 0 || cols % heads != 0 {
            return Err(Error::shape("head_concat", "planes must match and split evenly into heads"));
        }
        let dh = cols / heads;
        let (tr, ti) = (self.value(re).data(), self.value(im).data());
        let mut out = vec![0.0; rows * 2 * cols];
        for r in 0..rows {
            for h in 0..heads {
                let src = r * cols + h * dh;
                let dst = r * 2 * cols + h * 2 * dh;
                out[dst..dst + dh].copy_from_slice(&tr[src..src + dh]);
                out[dst + dh..dst + 2 * dh].copy_from_slice(&ti[src..src + dh]);
            }
        }
        let value = Tensor::new(vec![rows, 2 * cols], out)?;
        let rg = self.rg(re) || self.rg(im);
        Ok(self.push(value, Op::HeadConcat { re, im, heads }, rg))
    }

    /// Inverse of [`Tape::head_concat`]: the first (`second = false`) or
    /// second half of every head block.
    pub fn head_split(&mut self, x: Var, heads: usize, second: bool) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x));
        if heads == 0 || cols % (2 * heads) != 0 {
            return Err(Error::shape("head_split", format!("{cols} columns, {heads} heads")));
        }
        let dh = cols / (2 * heads);
        let off = if second { dh } else { 0 };
        let tx = self.value(x).data();
        let mut out = vec![0.0; rows * heads * dh];
        for r in 0..rows {
            for h in 0..heads {
                let src = r * cols + h * 2 * dh + off;
                let dst = (r * heads + h) * dh;
                out[dst..dst + dh].copy_from_slice(&tx[src..src + dh]);
            }
        }
        let value = Tensor::new(vec![rows, heads * dh], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::HeadSplit { x, heads, second }, rg))
    }

    /// Softmax attention `softmax(Q K^T * scale) V` independently for every
    /// `(sequence, head)` block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttentionDims) -> Result<Var> {
        let n = dims.batch * dims.seq;
        let cols = dims.heads * dims.width;
        for t in [q, k, v] {
            if mat_dims(self.value(t)) != (n, cols) {
                return Err(Error::shape(
                    "attention",
                    format!("expected [{n}, {cols}], got {:?}", self.value(t).shape()),
                ));
            }
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..dims.batch * dims.heads)
            .into_par_iter()
            .map(|bh| attention_block_forward(qd, kd, vd, dims, bh / dims.heads, bh % dims.heads))
            .collect();
        let (s, w) = (dims.seq, dims.width);
        let mut out = vec![0.0; n * cols];
        let mut probs = Vec::with_capacity(dims.batch * dims.heads * s * s);
        for (bh, (o, p)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / dims.heads, bh % dims.heads);
            for i in 0..s {
                let dst = (b * s + i) * cols + h * w;
                out[dst..dst + w].copy_from_slice(&o[i * w..(i + 1) * w]);
            }
            probs.extend(p);
        }
        let value = Tensor::new(vec![n, cols], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// A node whose forward value is `value` (e.g. a quantize-dequantize of
    /// `x`) but whose gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", value.shape(), self.value(x).shape()),
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![], vec![total]).expect("scalar"), Op::Sum(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = mat_dims(self.value(logits));
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &self.value(logits).data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::new(vec![], vec![loss / rows.max(1) as f64])?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.value(v).shape().to_vec(), delta).expect("gradient shaped like value"),
                )
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = mat_dims(ta);
                let n = g.cols();
                if self.rg(*a) {
                    // dA = dC B^T (or dC B when B was transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), !trans_b, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n x k: dB = dC^T A
                        gemm(n, m, k, gd, true, ta.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut db);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(tb).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, gd.iter().zip(c).map(|(g, y)| g * y).collect());
            }
            Op::Relu2(a) => {
                let ta = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    gd.iter().zip(ta).map(|(g, &x)| g * 2.0 * x.max(0.0)).collect(),
                );
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = self.value(*x);
                let gw = self.value(*gain).data();
                let d = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dgain = vec![0.0; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &tx.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = (0..d).map(|j| gr[j] * gw[j] * xr[j]).sum();
                    let c = inv * inv * inv * dot / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * gw[j] * gr[j] - c * xr[j];
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = self.value(*a).rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &gd[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::HeadConcat { re, im, heads } => {
                let (rows, cols) = mat_dims(self.value(*re));
                let dh = cols / heads;
                let mut dre = vec![0.0; rows * cols];
                let mut dim = vec![0.0; rows * cols];
                for r in 0..rows {
                    for h in 0..*heads {
                        let dst = r * cols + h * dh;
                        let src = r * 2 * cols + h * 2 * dh;
                        dre[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        dim[dst..dst + dh].copy_from_slice(&gd[src + dh..src + 2 * dh]);
                    }
                }
                self.accumulate(grads, *re, dre);
                self.accumulate(grads, *im, dim);
            }
            Op::HeadSplit { x, heads, second } => {
                let (rows, cols) = mat_dims(self.value(*x));
                let dh = cols / (2 * heads);
                let off = if *second { dh } else { 0 };
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for h in 0..*heads {
                        let dst = r * cols + h * 2 * dh + off;
                        let src = (r * heads + h) * dh;
                        dx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let blocks: Vec<[Vec<f64>; 3]> = (0..dims.batch * dims.heads)
                    .into_par_iter()
                    .map(|bh| attention_block_backward(qd, kd, vd, gd, probs, *dims, bh))
                    .collect();
                let (s, w) = (dims.seq, dims.width);
                let cols = dims.heads * w;
                let n = dims.batch * s;
                let mut dq = vec![0.0; n * cols];
                let mut dk = vec![0.0; n * cols];
                let mut dv = vec![0.0; n * cols];
                for (bh, [bq, bk, bv]) in blocks.into_iter().enumerate() {
                    let (b, h) = (bh / dims.heads, bh % dims.heads);
                    for i in 0..s {
                        let dst = (b * s + i) * cols + h * w;
                        dq[dst..dst + w].copy_from_slice(&bq[i * w..(i + 1) * w]);
                        dk[dst..dst + w].copy_from_slice(&bk[i * w..(i + 1) * w]);
                        dv[dst..dst + w].copy_from_slice(&bv[i * w..(i + 1) * w]);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::StraightThrough(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![gd[0]; self.value(*a).len()]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).cols();
                let scale = gd[0] / targets.len().max(1) as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

fn extract_block(data: &[f64], dims: AttentionDims, b: usize, h: usize) -> Vec<f64> {
    let (s, w) = (dims.seq, dims.width);
    let cols = dims.heads * w;
    let mut out = Vec::with_capacity(s * w);
    for i in 0..s {
        let src = (b * s + i) * cols + h * w;
        out.extend_from_slice(&data[src..src + w]);
    }
    out
}

/// Returns the `seq x width` output block and the `seq x seq` probabilities.
fn attention_block_forward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    dims: AttentionDims,
    b: usize,
    h: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (s, w) = (dims.seq, dims.width);
    let (qb, kb, vb) = (
        extract_block(qd, dims, b, h),
        extract_block(kd, dims, b, h),
        extract_block(vd, dims, b, h),
    );
    let mut p = vec![0.0; s * s];
    gemm(s, w, s, &qb, false, &kb, true, 0.0, &mut p);
    for i in 0..s {
        let row = &mut p[i * s..(i + 1) * s];
        let visible = if dims.causal { i + 1 } else { s };
        let mut max = f64::NEG_INFINITY;
        for v in row[..visible].iter_mut() {
            *v *= dims.scale;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in row[..visible].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..visible].iter_mut() {
            *v /= sum;
        }
        row[visible..].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut o = vec![0.0; s * w];
    gemm(s, s, w, &p, false, &vb, false, 0.0, &mut o);
    (o, p)
}

fn attention_block_backward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    gd: &[f64],
    probs: &[f64],
    dims: AttentionDims,
    bh: usize,
) -> [Vec<f64>; 3] {
    let (b, h) = (bh / dims.heads, bh % dims.heads);
    let (s, w) = (dims.seq, dims.width);
    let p = &probs[bh * s * s..(bh + 1) * s * s];
    let (qb, kb, vb, gb) = (
        extract_block(qd, dims, b, h),
        extract_block(kd, dims, b, h),
        extract_block(vd, dims, b, h),
        extract_block(gd, dims, b, h),
    );
    // dV = P^T dO
    let mut dv = vec![0.0; s * w];
    gemm(s, s, w, p, true, &gb, false, 0.0, &mut dv);
    // dP = dO V^T, then dS = P * (dP - rowsum(P * dP)) * scale
    let mut ds = vec![0.0; s * s];
    gemm(s, w, s, &gb, false, &vb, true, 0.0, &mut ds);
    for i in 0..s {
        let pr = &p[i * s..(i + 1) * s];
        let dr = &mut ds[i * s..(i + 1) * s];
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (d, &pp) in dr.iter_mut().zip(pr) {
            *d = pp * (*d - dot) * dims.scale;
        }
    }
    let mut dq = vec![0.0; s * w];
    gemm(s, s, w, &ds, false, &kb, false, 0.0, &mut dq);
    let mut dk = vec![0.0; s * w];
    gemm(s, s, w, &ds, true, &qb, false, 0.0, &mut dk);
    [dq, dk, dv]
}
