use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{conv_output_extent, conv_transpose_output_extent, gemm, gemm_alpha, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_t: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddBias { x: usize, b: usize, channels: usize, inner: usize },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Softmax { x: usize, n: usize, inner: usize },
    Attention { q: usize, k: usize, v: usize, batch: usize, n: usize, m: usize, d: usize, dv: usize, scale: T, probs: Vec<T> },
    Conv2d { x: usize, w: usize, geom: ConvGeom, batch: usize, out_ch: usize },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom, batch: usize, in_ch: usize },
    Reshape { x: usize },
    TransposeLast2 { x: usize, m: usize, n: usize },
    ConcatLast { xs: Vec<usize>, widths: Vec<usize> },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. One tape per training step; tapes are not shared
/// across threads.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the variable was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.grads[v.index].as_ref().map(|g| Tensor {
            shape: self.nodes[v.index].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node_value(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    // ---------------------------------------------------------------- ops

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.node_value(ai).shape(), self.node_value(bi).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.node_value(ai).data(), false, self.node_value(bi).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[ai, bi], Op::MatMul { a: ai, b: bi, m, k, n }))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, false)
    }

    /// Batched product with the second operand transposed:
    /// `[B, m, k] x [B, n, k]^T -> [B, m, n]`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, true)
    }

    fn batch_matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.node_value(ai).shape(), self.node_value(bi).shape());
        let op = if b_t { "batch_matmul_nt" } else { "batch_matmul" };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(op, sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(op, sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.node_value(ai).data(), self.node_value(bi).data());
        for s in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[s * m * k..],
                false,
                &bd[s * k * n..],
                b_t,
                &mut out[s * m * n..(s + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, &[ai, bi], Op::BatchMatMul { a: ai, b: bi, batch, m, k, n, b_t }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.node_value(ai), self.node_value(bi));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(ta.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, &[ai, bi], Op::Add { a: ai, b: bi }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, &[ai, bi], Op::Sub { a: ai, b: bi }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, &[ai, bi], Op::Mul { a: ai, b: bi }))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, &[ai, bi], Op::Div { a: ai, b: bi }))
    }

    /// Adds `b[C]` along axis 1 of `x[B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let (tx, tb) = (self.node_value(xi), self.node_value(bi));
        if tx.rank() < 2 || tb.rank() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let channels = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bias = tb.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, &[xi, bi], Op::AddBias { x: xi, b: bi, channels, inner }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let c = T::of(c);
        let value = self.node_value(xi).map(|v| v * c);
        Ok(self.push(value, &[xi], Op::Scale { x: xi, c }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let c = T::of(c);
        let value = self.node_value(xi).map(|v| v + c);
        Ok(self.push(value, &[xi], Op::AddScalar { x: xi }))
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.node_value(xi).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(value, &[xi], Op::Relu { x: xi }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.node_value(xi).map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.push(value, &[xi], Op::Sigmoid { x: xi }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.node_value(xi).map(|v| v.exp());
        Ok(self.push(value, &[xi], Op::Exp { x: xi }))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xi = self.check(x)?;
        if lo > hi {
            return Err(Error::Config(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.node_value(xi).map(|v| v.max(lo).min(hi));
        Ok(self.push(value, &[xi], Op::Clamp { x: xi, lo, hi }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let tx = self.node_value(xi);
        if axis >= tx.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", tx.shape())));
        }
        let n = tx.shape()[axis];
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let outer = tx.numel() / (n * inner);
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        let mut row = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    row[j] = src[base + j * inner];
                    max = max.max(row[j]);
                }
                let mut total = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                for j in 0..n {
                    out[base + j * inner] = row[j] / total;
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(value, &[xi], Op::Softmax { x: xi, n, inner }))
    }

    /// Fused `softmax(scale * q k^T) v` over `[B, n, d] x [B, m, d] x [B, m, dv]`.
    /// Only the attention probabilities are kept for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (sq, sk, sv) = (self.node_value(qi).shape(), self.node_value(ki).shape(), self.node_value(vi).shape());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
            return Err(Error::dim("attention", sq, sk));
        }
        let (batch, n, d, m, dv) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
        let scale = T::of(scale);
        let (qd, kd, vd) = (self.node_value(qi).data(), self.node_value(ki).data(), self.node_value(vi).data());
        let mut probs = vec![T::zero(); batch * n * m];
        let mut out = vec![T::zero(); batch * n * dv];
        for s in 0..batch {
            let p = &mut probs[s * n * m..(s + 1) * n * m];
            gemm_alpha(n, d, m, scale, &qd[s * n * d..], false, &kd[s * m * d..], true, p, false);
            for row in p.chunks_mut(m) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                let inv = T::one() / total;
                row.iter_mut().for_each(|r| *r *= inv);
            }
            gemm(n, m, dv, p, false, &vd[s * m * dv..], false, &mut out[s * n * dv..(s + 1) * n * dv], false);
        }
        let value = Tensor::new(&[batch, n, dv], out)?;
        let op = Op::Attention { q: qi, k: ki, v: vi, batch, n, m, d, dv, scale, probs };
        Ok(self.push(value, &[qi, ki, vi], op))
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (tx, tw) = (self.node_value(xi), self.node_value(wi));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::dim("conv2d", sx, sw));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kernel) = (sw[0], sw[2]);
        let out_h = conv_output_extent(height, kernel, stride, padding)?;
        let out_w = conv_output_extent(width, kernel, stride, padding)?;
        let geom = ConvGeom { channels, height, width, kernel, stride, padding, out_h, out_w };
        let (plen, pos) = (geom.patch_len(), geom.positions());
        let cols_w = batch * pos;
        let mut cols = vec![T::zero(); plen * cols_w];
        let in_len = channels * height * width;
        for s in 0..batch {
            geom.im2col(&tx.data()[s * in_len..(s + 1) * in_len], &mut cols, s * pos, cols_w);
        }
        let mut tmp = vec![T::zero(); out_ch * cols_w];
        gemm(out_ch, plen, cols_w, tw.data(), false, &cols, false, &mut tmp, false);
        let out = channel_major_to_batch(&tmp, batch, out_ch, pos);
        let value = Tensor::new(&[batch, out_ch, out_h, out_w], out)?;
        Ok(self.push(value, &[xi, wi], Op::Conv2d { x: xi, w: wi, geom, batch, out_ch }))
    }

    /// Transposed convolution of `x[B, C, H, W]` with `w[C, O, k, k]`; the
    /// adjoint of [`Tape::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (tx, tw) = (self.node_value(xi), self.node_value(wi));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(Error::dim("transposed_conv2d", sx, sw));
        }
        let (batch, in_ch, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kernel) = (sw[1], sw[2]);
        let out_h = conv_transpose_output_extent(height, kernel, stride, padding)?;
        let out_w = conv_transpose_output_extent(width, kernel, stride, padding)?;
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom {
            channels: out_ch,
            height: out_h,
            width: out_w,
            kernel,
            stride,
            padding,
            out_h: height,
            out_w: width,
        };
        let (plen, pos) = (geom.patch_len(), geom.positions());
        let cols_w = batch * pos;
        let xt = batch_to_channel_major(tx.data(), batch, in_ch, pos);
        let mut cols = vec![T::zero(); plen * cols_w];
        gemm(plen, in_ch, cols_w, tw.data(), true, &xt, false, &mut cols, false);
        let out_len = out_ch * out_h * out_w;
        let mut out = vec![T::zero(); batch * out_len];
        for s in 0..batch {
            geom.col2im(&cols, s * pos, cols_w, &mut out[s * out_len..(s + 1) * out_len]);
        }
        let value = Tensor::new(&[batch, out_ch, out_h, out_w], out)?;
        Ok(self.push(value, &[xi, wi], Op::ConvTranspose2d { x: xi, w: wi, geom, batch, in_ch }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.node_value(xi).clone().reshape(shape)?;
        Ok(self.push(value, &[xi], Op::Reshape { x: xi }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let tx = self.node_value(xi);
        let r = tx.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last2", format!("rank {r} < 2")));
        }
        let (m, n) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let out = transpose_blocks(tx.data(), m, n);
        let mut shape = tx.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[xi], Op::TransposeLast2 { x: xi, m, n }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_last", "no inputs"));
        }
        let idx = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = self.node_value(idx[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.node_value(i).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.node_value(i).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &idx, Op::ConcatLast { xs: idx.clone(), widths }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.node_value(xi).sum());
        Ok(self.push(value, &[xi], Op::Sum { x: xi }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ----------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every reachable `requires_grad` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 || self.nodes[li].value.rank() > 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |j: usize| nodes[j].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = acc(grads, nodes, a) {
                    gemm(m, n, k, g, false, val(b), true, ga, true);
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    gemm(k, m, n, val(a), true, g, false, gb, true);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, b_t } => {
                if nodes[a].requires_grad {
                    let bd = val(b);
                    let ga = acc(grads, nodes, a).unwrap();
                    for s in 0..batch {
                        let gs = &g[s * m * n..];
                        let dst = &mut ga[s * m * k..(s + 1) * m * k];
                        // dA = dC B^T, or dC B when B was used transposed
                        gemm(m, n, k, gs, false, &bd[s * k * n..], !b_t, dst, true);
                    }
                }
                if nodes[b].requires_grad {
                    let ad = val(a);
                    let gb = acc(grads, nodes, b).unwrap();
                    for s in 0..batch {
                        let gs = &g[s * m * n..];
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if b_t {
                            // B stored [n, k]: dB = dC^T A
                            gemm(n, m, k, gs, true, &ad[s * m * k..], false, dst, true);
                        } else {
                            gemm(k, m, n, &ad[s * m * k..], true, gs, false, dst, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = acc(grads, nodes, a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    axpy(gb, g, T::one());
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = acc(grads, nodes, a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    axpy(gb, g, -T::one());
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = acc(grads, nodes, a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Div { a, b } => {
                if let Some(ga) = acc(grads, nodes, a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += gv / bv;
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    // d(a/b)/db = -(a/b)/b
                    for (((d, &gv), &bv), &q) in gb.iter_mut().zip(g).zip(val(b)).zip(out) {
                        *d -= gv * q / bv;
                    }
                }
            }
            &Op::AddBias { x, b, channels, inner } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        gb[i % channels] += chunk.iter().copied().sum();
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    axpy(gx, g, c);
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    axpy(gx, g, T::one());
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (T::one() - y);
                    }
                }
            }
            &Op::Exp { x } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                        if xv >= lo && xv <= hi {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Softmax { x, n, inner } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    let outer = out.len() / (n * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * out[base + j * inner];
                            }
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Attention { q, k, v, batch, n, m, d, dv, scale, ref probs } => {
                if let Some(gv) = acc(grads, nodes, v) {
                    for s in 0..batch {
                        let dst = &mut gv[s * m * dv..(s + 1) * m * dv];
                        gemm(m, n, dv, &probs[s * n * m..], true, &g[s * n * dv..], false, dst, true);
                    }
                }
                if !nodes[q].requires_grad && !nodes[k].requires_grad {
                    return;
                }
                // dS = P * (dP - rowsum(dP * P)), pre-multiplied by the scale
                let vd = val(v);
                let mut ds = vec![T::zero(); batch * n * m];
                for s in 0..batch {
                    let dp = &mut ds[s * n * m..(s + 1) * n * m];
                    gemm(n, dv, m, &g[s * n * dv..], false, &vd[s * m * dv..], true, dp, false);
                    for (row, prow) in dp.chunks_mut(m).zip(probs[s * n * m..].chunks(m)) {
                        let dot = row.iter().zip(prow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        for (r, &pv) in row.iter_mut().zip(prow) {
                            *r = scale * pv * (*r - dot);
                        }
                    }
                }
                if let Some(gq) = acc(grads, nodes, q) {
                    let kd = val(k);
                    for s in 0..batch {
                        let dst = &mut gq[s * n * d..(s + 1) * n * d];
                        gemm(n, m, d, &ds[s * n * m..], false, &kd[s * m * d..], false, dst, true);
                    }
                }
                if let Some(gk) = acc(grads, nodes, k) {
                    let qd = val(q);
                    for s in 0..batch {
                        let dst = &mut gk[s * m * d..(s + 1) * m * d];
                        gemm(m, n, d, &ds[s * n * m..], true, &qd[s * n * d..], false, dst, true);
                    }
                }
            }
            &Op::Conv2d { x, w, geom, batch, out_ch } => {
                let (plen, pos) = (geom.patch_len(), geom.positions());
                let cols_w = batch * pos;
                let gt = batch_to_channel_major(g, batch, out_ch, pos);
                let in_len = geom.channels * geom.height * geom.width;
                if nodes[w].requires_grad {
                    let mut cols = vec![T::zero(); plen * cols_w];
                    let xd = val(x);
                    for s in 0..batch {
                        geom.im2col(&xd[s * in_len..(s + 1) * in_len], &mut cols, s * pos, cols_w);
                    }
                    let gw = acc(grads, nodes, w).unwrap();
                    gemm(out_ch, cols_w, plen, &gt, false, &cols, true, gw, true);
                }
                if nodes[x].requires_grad {
                    let mut dcols = vec![T::zero(); plen * cols_w];
                    gemm(plen, out_ch, cols_w, val(w), true, &gt, false, &mut dcols, false);
                    let gx = acc(grads, nodes, x).unwrap();
                    for s in 0..batch {
                        geom.col2im(&dcols, s * pos, cols_w, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            &Op::ConvTranspose2d { x, w, geom, batch, in_ch } => {
                let (plen, pos) = (geom.patch_len(), geom.positions());
                let cols_w = batch * pos;
                let out_len = geom.channels * geom.height * geom.width;
                let mut dcols = vec![T::zero(); plen * cols_w];
                for s in 0..batch {
                    geom.im2col(&g[s * out_len..(s + 1) * out_len], &mut dcols, s * pos, cols_w);
                }
                if nodes[w].requires_grad {
                    let xt = batch_to_channel_major(val(x), batch, in_ch, pos);
                    let gw = acc(grads, nodes, w).unwrap();
                    gemm(in_ch, cols_w, plen, &xt, false, &dcols, true, gw, true);
                }
                if nodes[x].requires_grad {
                    let mut gxt = vec![T::zero(); in_ch * cols_w];
                    gemm(in_ch, plen, cols_w, val(w), false, &dcols, false, &mut gxt, false);
                    let back = channel_major_to_batch(&gxt, batch, in_ch, pos);
                    let gx = acc(grads, nodes, x).unwrap();
                    axpy(gx, &back, T::one());
                }
            }
            &Op::TransposeLast2 { x, m, n } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    let back = transpose_blocks(g, n, m);
                    axpy(gx, &back, T::one());
                }
            }
            Op::ConcatLast { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&xi, &w) in xs.iter().zip(widths) {
                    if let Some(gx) = acc(grads, nodes, xi) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            axpy(&mut gx[r * w..(r + 1) * w], src, T::one());
                        }
                    }
                    offset += w;
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = acc(grads, nodes, x) {
                    let s = g[0];
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

/// Gradient buffer of node `j`, allocated on first use; `None` when the node
/// does not require a gradient.
fn acc<'a, T: Float>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()]))
}

fn axpy<T: Float>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `[C, B*P]` -> `[B, C, P]`.
fn channel_major_to_batch<T: Float>(src: &[T], batch: usize, channels: usize, pos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for s in 0..batch {
            out[(s * channels + c) * pos..][..pos].copy_from_slice(&src[c * batch * pos + s * pos..][..pos]);
        }
    }
    out
}

/// `[B, C, P]` -> `[C, B*P]`.
fn batch_to_channel_major<T: Float>(src: &[T], batch: usize, channels: usize, pos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..batch {
        for c in 0..channels {
            out[c * batch * pos + s * pos..][..pos].copy_from_slice(&src[(s * channels + c) * pos..][..pos]);
        }
    }
    out
}

/// Transposes each consecutive `m x n` block.
fn transpose_blocks<T: Float>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (sb, db) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                db[j * m + i] = sb[i * n + j];
            }
        }
    }
    out
}
