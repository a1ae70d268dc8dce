//! Dense tensors with a recorded computation graph and reverse-mode gradients.
//!
//! Tensors are cheap handles onto graph nodes. Leaves created with
//! `requires_grad` accumulate gradients additively across `backward` calls
//! until `zero_grad`; intermediate gradients live only for the duration of
//! one backward pass. A graph is confined to one thread (`Rc` inside).

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::scalar::Scalar;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("data", &self.node.data.borrow())
            .finish()
    }
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    /// Whether gradient flows to (leaf) or through (interior) this node.
    track: bool,
    op: Option<Op<S>>,
}

enum Op<S: Scalar> {
    MatMul { a: Tensor<S>, b: Tensor<S> },
    MatMulBatch { a: Tensor<S>, b: Tensor<S> },
    MatMulBatchT { a: Tensor<S>, b: Tensor<S> },
    Conv2d { x: Tensor<S>, w: Tensor<S>, stride: usize, pad: usize },
    MaxPool { x: Tensor<S>, argmax: Vec<usize> },
    GlobalAvgPool { x: Tensor<S> },
    Relu { x: Tensor<S> },
    Sigmoid { x: Tensor<S> },
    Softmax { x: Tensor<S>, axis: usize },
    LayerNorm { x: Tensor<S>, gain: Tensor<S>, bias: Tensor<S>, eps: S },
    Linear { x: Tensor<S>, w: Tensor<S>, b: Tensor<S> },
    PerClassLinear { x: Tensor<S>, w: Tensor<S>, b: Tensor<S> },
    Concat { parts: Vec<Tensor<S>>, axis: usize },
    Add { a: Tensor<S>, b: Tensor<S> },
    Sub { a: Tensor<S>, b: Tensor<S> },
    Mul { a: Tensor<S>, b: Tensor<S> },
    AddBroadcast { x: Tensor<S>, b: Tensor<S> },
    BroadcastBatch { x: Tensor<S> },
    ScaleChannels { x: Tensor<S>, g: Tensor<S> },
    ScaleSpatial { x: Tensor<S>, m: Tensor<S> },
    AddChannelBias { x: Tensor<S>, b: Tensor<S> },
    MulRows { x: Tensor<S>, s: Tensor<S> },
    AddScalar { x: Tensor<S> },
    MulScalar { x: Tensor<S>, c: S },
    Log { x: Tensor<S> },
    Pow { x: Tensor<S>, e: S },
    Clamp { x: Tensor<S>, lo: S, hi: S },
    Mean { x: Tensor<S> },
    Sum { x: Tensor<S> },
    Reshape { x: Tensor<S> },
    TransposeLast2 { x: Tensor<S> },
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<&Tensor<S>> {
        use Op::*;
        match self {
            MatMul { a, b } | MatMulBatch { a, b } | MatMulBatchT { a, b } => vec![a, b],
            Conv2d { x, w, .. } => vec![x, w],
            LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Linear { x, w, b } | PerClassLinear { x, w, b } => vec![x, w, b],
            Concat { parts, .. } => parts.iter().collect(),
            Add { a, b } | Sub { a, b } | Mul { a, b } => vec![a, b],
            AddBroadcast { x, b } | AddChannelBias { x, b } => vec![x, b],
            ScaleChannels { x, g } => vec![x, g],
            ScaleSpatial { x, m } => vec![x, m],
            MulRows { x, s } => vec![x, s],
            MaxPool { x, .. }
            | GlobalAvgPool { x }
            | Relu { x }
            | Sigmoid { x }
            | Softmax { x, .. }
            | BroadcastBatch { x }
            | AddScalar { x }
            | MulScalar { x, .. }
            | Log { x }
            | Pow { x, .. }
            | Clamp { x, .. }
            | Mean { x }
            | Sum { x }
            | Reshape { x }
            | TransposeLast2 { x } => vec![x],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn new_node(shape: Vec<usize>, data: Vec<S>, track: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                track,
                op,
            }),
        }
    }

    fn result(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let track = op.parents().iter().any(|p| p.node.track);
        Self::new_node(shape, data, track, Some(op))
    }

    // ── Construction ───────────────────────────────────────────────

    pub fn leaf(data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "leaf: shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Contract(format!("leaf: zero extent in {shape:?}")));
        }
        Ok(Self::new_node(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_node(shape.to_vec(), vec![S::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::new_node(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn scalar_value(v: S) -> Self {
        Self::new_node(vec![1], vec![v], false, None)
    }

    pub fn from_f64s(data: &[f64], shape: &[usize], requires_grad: bool) -> Result<Self> {
        Self::leaf(
            data.iter().map(|&v| S::from_f64(v)).collect(),
            shape,
            requires_grad,
        )
    }

    // ── Accessors ──────────────────────────────────────────────────

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.op.is_none() && self.node.track
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Replace the stored values (same length). Used by optimizers and
    /// parameter loading; only sensible on leaves.
    pub fn set_data(&self, values: &[S]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<S>> {
        self.node.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<S> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![S::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values as a fresh leaf with no history and no gradient.
    pub fn detach(&self) -> Tensor<S> {
        Self::new_node(self.node.shape.clone(), self.to_vec(), false, None)
    }

    fn accumulate_leaf_grad(&self, g: &[S]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, &v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ── Ops ────────────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Batched product: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn matmul_batch(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_batch",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bsz * m * n];
        {
            let (da, db) = (self.data(), other.data());
            for i in 0..bsz {
                kernels::matmul_acc(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(Tensor::result(
            vec![bsz, m, n],
            out,
            Op::MatMulBatch {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Batched product with the right operand transposed:
    /// `[B,m,k] x [B,n,k] -> [B,m,n]`.
    pub fn matmul_batch_t(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "matmul_batch_t",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![S::zero(); bsz * m * n];
        {
            let (da, db) = (self.data(), other.data());
            for i in 0..bsz {
                kernels::matmul_bt_acc(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * n * k..(i + 1) * n * k],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(Tensor::result(
            vec![bsz, m, n],
            out,
            Op::MatMulBatchT {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// `x [B,Ci,H,W] * w [Co,Ci,k,k] -> [B,Co,OH,OW]`, zero padding.
    pub fn conv2d(&self, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (bsz, ci, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        if k > h + 2 * pad || k > wdt + 2 * pad || stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let oh = kernels::conv_out_extent(h, k, stride, pad);
        let ow = kernels::conv_out_extent(wdt, k, stride, pad);
        let positions = oh * ow;
        let patch = ci * k * k;
        let mut out = vec![S::zero(); bsz * co * positions];
        {
            let dx = self.data();
            let dw = w.data();
            let mut col = vec![S::zero(); patch * positions];
            for b in 0..bsz {
                kernels::im2col(
                    &dx[b * ci * h * wdt..(b + 1) * ci * h * wdt],
                    ci,
                    h,
                    wdt,
                    k,
                    stride,
                    pad,
                    &mut col,
                );
                kernels::matmul_acc(
                    &dw,
                    &col,
                    co,
                    patch,
                    positions,
                    &mut out[b * co * positions..(b + 1) * co * positions],
                );
            }
        }
        Ok(Tensor::result(
            vec![bsz, co, oh, ow],
            out,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Max pooling with window `k` and the given stride; ties pick the
    /// first (lowest-index) position.
    pub fn max_pool(&self, k: usize, stride: usize) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 4 || k == 0 || stride == 0 || k > sx[2] || k > sx[3] {
            return Err(Error::Shape {
                op: "max_pool",
                lhs: sx.to_vec(),
                rhs: vec![k, k],
            });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = kernels::conv_out_extent(h, k, stride, 0);
        let ow = kernels::conv_out_extent(w, k, stride, 0);
        let mut out = vec![S::zero(); bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let dx = self.data();
            for bc in 0..bsz * c {
                let plane = &dx[bc * h * w..(bc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let v = plane[iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_idx = iy * w + ix;
                                }
                            }
                        }
                        let o = bc * oh * ow + oy * ow + ox;
                        out[o] = best;
                        argmax[o] = bc * h * w + best_idx;
                    }
                }
            }
        }
        Ok(Tensor::result(
            vec![bsz, c, oh, ow],
            out,
            Op::MaxPool {
                x: self.clone(),
                argmax,
            },
        ))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: sx.to_vec(),
                rhs: vec![],
            });
        }
        let (bsz, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = S::from_f64(1.0 / hw as f64);
        let dx = self.data();
        let mut out = vec![S::zero(); bsz * c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = S::zero();
            for &v in &dx[i * hw..(i + 1) * hw] {
                s += v;
            }
            *o = s * inv;
        }
        drop(dx);
        Ok(Tensor::result(
            vec![bsz, c],
            out,
            Op::GlobalAvgPool { x: self.clone() },
        ))
    }

    pub fn relu(&self) -> Tensor<S> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        Tensor::result(self.shape().to_vec(), out, Op::Relu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out = self
            .data()
            .iter()
            .map(|&v| {
                if v >= S::zero() {
                    S::one() / (S::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        Tensor::result(self.shape().to_vec(), out, Op::Sigmoid { x: self.clone() })
    }

    /// Softmax along `axis`, with max-subtraction for overflow safety.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        let sx = self.shape();
        if axis >= sx.len() {
            return Err(Error::Contract(format!(
                "softmax: axis {axis} out of range for shape {sx:?}"
            )));
        }
        let axis_len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let outer: usize = sx[..axis].iter().product();
        let mut out = self.to_vec();
        let mut lane = vec![S::zero(); axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = out[base + j * inner];
                }
                kernels::softmax_lane(&mut lane);
                for (j, &l) in lane.iter().enumerate() {
                    out[base + j * inner] = l;
                }
            }
        }
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let sx = self.shape();
        let d = *sx.last().ok_or_else(|| {
            Error::Contract("layer_norm: rank-0 input".to_string())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: sx.to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Config("layer_norm: eps must be > 0".to_string()));
        }
        let lanes = self.numel() / d;
        let dx = self.data();
        let dg = gain.data();
        let db = bias.data();
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::zero(); self.numel()];
        for l in 0..lanes {
            let x = &dx[l * d..(l + 1) * d];
            let mut mean = S::zero();
            for &v in x {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in x {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for (j, &v) in x.iter().enumerate() {
                out[l * d + j] = (v - mean) * inv_std * dg[j] + db[j];
            }
        }
        drop(dx);
        drop(dg);
        drop(db);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    /// Affine map `x [n,in] -> x w^T + b` with `w [out,in]`, `b [out]`.
    pub fn linear(&self, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || b.shape() != [sw[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![S::zero(); n * dout];
        kernels::matmul_bt_acc(&self.data(), &w.data(), n, din, dout, &mut out);
        {
            let db = b.data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(db.iter()) {
                    *o += bv;
                }
            }
        }
        Ok(Tensor::result(
            vec![n, dout],
            out,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
            },
        ))
    }

    /// One independent weight vector per class row:
    /// `x [B,C,d], w [C,d], b [C] -> z [B,C]` with `z[b,c] = w_c . x[b,c] + b_c`.
    pub fn per_class_linear(&self, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] || sx[2] != sw[1] || b.shape() != [sw[0]]
        {
            return Err(Error::Shape {
                op: "per_class_linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (bsz, c, d) = (sx[0], sx[1], sx[2]);
        let dx = self.data();
        let dw = w.data();
        let db = b.data();
        let mut out = vec![S::zero(); bsz * c];
        for bi in 0..bsz {
            for ci in 0..c {
                let xr = &dx[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                let wr = &dw[ci * d..(ci + 1) * d];
                let mut s = S::zero();
                for (&xv, &wv) in xr.iter().zip(wr) {
                    s += xv * wv;
                }
                out[bi * c + ci] = s + db[ci];
            }
        }
        drop(dx);
        drop(dw);
        drop(db);
        Ok(Tensor::result(
            vec![bsz, c],
            out,
            Op::PerClassLinear {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no inputs".to_string()));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let sp = p.shape();
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sp.to_vec(),
                });
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![S::zero(); numel(&shape)];
        let row_out = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[axis];
                let dp = p.data();
                let src = &dp[o * pa * inner..(o + 1) * pa * inner];
                out[o * row_out + offset..o * row_out + offset + pa * inner]
                    .copy_from_slice(src);
                offset += pa * inner;
            }
        }
        Ok(Tensor::result(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    fn zip_elementwise(
        &self,
        other: &Tensor<S>,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Vec<S>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: op_name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise(other, "add", |a, b| a + b)?;
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise(other, "sub", |a, b| a - b)?;
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Sub {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise(other, "mul", |a, b| a * b)?;
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// `x [B,..rest] + b [..rest]`, broadcast over the leading axis.
    pub fn add_broadcast(&self, b: &Tensor<S>) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() < 2 || &sx[1..] != b.shape() {
            return Err(Error::Shape {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let n = b.numel();
        let db = b.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + db[i % n])
            .collect();
        drop(db);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::AddBroadcast {
                x: self.clone(),
                b: b.clone(),
            },
        ))
    }

    /// Repeat `[..rest]` into `[batch, ..rest]`.
    pub fn broadcast_batch(&self, batch: usize) -> Result<Tensor<S>> {
        if batch == 0 {
            return Err(Error::Contract("broadcast_batch: batch 0".to_string()));
        }
        let mut shape = Vec::with_capacity(self.shape().len() + 1);
        shape.push(batch);
        shape.extend_from_slice(self.shape());
        let src = self.data();
        let mut out = Vec::with_capacity(batch * src.len());
        for _ in 0..batch {
            out.extend_from_slice(&src);
        }
        drop(src);
        Ok(Tensor::result(shape, out, Op::BroadcastBatch { x: self.clone() }))
    }

    /// `x [B,C,H,W] * g [B,C]`, one gate per channel.
    pub fn scale_channels(&self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 4 || g.shape() != [sx[0], sx[1]] {
            return Err(Error::Shape {
                op: "scale_channels",
                lhs: sx.to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let hw = sx[2] * sx[3];
        let dg = g.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * dg[i / hw])
            .collect();
        drop(dg);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::ScaleChannels {
                x: self.clone(),
                g: g.clone(),
            },
        ))
    }

    /// `x [B,C,H,W] * m [B,1,H,W]`, one gate per spatial position.
    pub fn scale_spatial(&self, m: &Tensor<S>) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 4 || m.shape() != [sx[0], 1, sx[2], sx[3]] {
            return Err(Error::Shape {
                op: "scale_spatial",
                lhs: sx.to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let dm = m.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = i / (c * hw);
                let p = i % hw;
                v * dm[b * hw + p]
            })
            .collect();
        drop(dm);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::ScaleSpatial {
                x: self.clone(),
                m: m.clone(),
            },
        ))
    }

    /// `x [B,C,H,W] + b [C]` per-channel bias.
    pub fn add_channel_bias(&self, b: &Tensor<S>) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 4 || b.shape() != [sx[1]] {
            return Err(Error::Shape {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let db = b.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + db[(i / hw) % c])
            .collect();
        drop(db);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::AddChannelBias {
                x: self.clone(),
                b: b.clone(),
            },
        ))
    }

    /// `x [B,n] * s [B,1]`, one scalar factor per row.
    pub fn mul_rows(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() != 2 || s.shape() != [sx[0], 1] {
            return Err(Error::Shape {
                op: "mul_rows",
                lhs: sx.to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let n = sx[1];
        let ds = s.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ds[i / n])
            .collect();
        drop(ds);
        Ok(Tensor::result(
            sx.to_vec(),
            out,
            Op::MulRows {
                x: self.clone(),
                s: s.clone(),
            },
        ))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v + c).collect();
        Tensor::result(self.shape().to_vec(), out, Op::AddScalar { x: self.clone() })
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::result(
            self.shape().to_vec(),
            out,
            Op::MulScalar { x: self.clone(), c },
        )
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&self) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v.ln()).collect();
        Tensor::result(self.shape().to_vec(), out, Op::Log { x: self.clone() })
    }

    /// Elementwise power with a constant exponent. `e == 0` is the constant
    /// one with zero gradient.
    pub fn pow_scalar(&self, e: S) -> Tensor<S> {
        let out = if e == S::zero() {
            vec![S::one(); self.numel()]
        } else if e == S::one() {
            self.to_vec()
        } else {
            self.data().iter().map(|&v| v.powf(e)).collect()
        };
        Tensor::result(self.shape().to_vec(), out, Op::Pow { x: self.clone(), e })
    }

    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Clamp {
                x: self.clone(),
                lo,
                hi,
            },
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        let inv = S::from_f64(1.0 / self.numel() as f64);
        let mut s = S::zero();
        for &v in self.data().iter() {
            s += v;
        }
        Tensor::result(vec![1], vec![s * inv], Op::Mean { x: self.clone() })
    }

    pub fn sum(&self) -> Tensor<S> {
        let mut s = S::zero();
        for &v in self.data().iter() {
            s += v;
        }
        Tensor::result(vec![1], vec![s], Op::Sum { x: self.clone() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::result(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape { x: self.clone() },
        ))
    }

    /// Swap the last two axes (rank >= 2); leading axes act as batch.
    pub fn transpose_last2(&self) -> Result<Tensor<S>> {
        let sx = self.shape();
        if sx.len() < 2 {
            return Err(Error::Contract(format!(
                "transpose_last2: rank {} < 2",
                sx.len()
            )));
        }
        let (m, n) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch = self.numel() / (m * n);
        let dx = self.data();
        let mut out = vec![S::zero(); self.numel()];
        for b in 0..batch {
            let src = &dx[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        drop(dx);
        let mut shape = sx.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(Tensor::result(
            shape,
            out,
            Op::TransposeLast2 { x: self.clone() },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────

    /// Reverse-mode gradient propagation from a scalar loss. Gradients
    /// accumulate additively into `requires_grad` leaves until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.track {
            return Ok(());
        }
        let order = self.topo_postorder();
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.op {
                None => t.accumulate_leaf_grad(&g),
                Some(op) => backward_op(t, op, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn topo_postorder(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            let parents: Vec<Tensor<S>> = match &t.node.op {
                Some(op) => op.parents().into_iter().cloned().collect(),
                None => Vec::new(),
            };
            if pi < parents.len() {
                stack.push((t.clone(), pi + 1));
                let p = &parents[pi];
                if p.node.track && !visited.contains(&p.id()) {
                    visited.insert(p.id());
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

fn add_into<S: Scalar>(grads: &mut HashMap<u64, Vec<S>>, t: &Tensor<S>, contrib: Vec<S>) {
    if !t.node.track {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(contrib) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contrib);
        }
    }
}

fn backward_op<S: Scalar>(
    out: &Tensor<S>,
    op: &Op<S>,
    g: &[S],
    grads: &mut HashMap<u64, Vec<S>>,
) {
    use Op::*;
    match op {
        MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.node.track {
                let mut da = vec![S::zero(); m * k];
                kernels::matmul_bt_acc(g, &b.data(), m, n, k, &mut da);
                add_into(grads, a, da);
            }
            if b.node.track {
                let mut db = vec![S::zero(); k * n];
                kernels::matmul_ta_acc(&a.data(), g, m, k, n, &mut db);
                add_into(grads, b, db);
            }
        }
        MatMulBatch { a, b } => {
            let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.node.track {
                let mut da = vec![S::zero(); bsz * m * k];
                let db_ = b.data();
                for i in 0..bsz {
                    kernels::matmul_bt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &db_[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                drop(db_);
                add_into(grads, a, da);
            }
            if b.node.track {
                let mut db = vec![S::zero(); bsz * k * n];
                let da_ = a.data();
                for i in 0..bsz {
                    kernels::matmul_ta_acc(
                        &da_[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                drop(da_);
                add_into(grads, b, db);
            }
        }
        MatMulBatchT { a, b } => {
            let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            if a.node.track {
                let mut da = vec![S::zero(); bsz * m * k];
                let db_ = b.data();
                for i in 0..bsz {
                    kernels::matmul_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &db_[i * n * k..(i + 1) * n * k],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                drop(db_);
                add_into(grads, a, da);
            }
            if b.node.track {
                let mut db = vec![S::zero(); bsz * n * k];
                let da_ = a.data();
                for i in 0..bsz {
                    kernels::matmul_ta_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &da_[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                        &mut db[i * n * k..(i + 1) * n * k],
                    );
                }
                drop(da_);
                add_into(grads, b, db);
            }
        }
        Conv2d { x, w, stride, pad } => {
            let sx = x.shape();
            let sw = w.shape();
            let (bsz, ci, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
            let (co, k) = (sw[0], sw[2]);
            let oh = kernels::conv_out_extent(h, k, *stride, *pad);
            let ow = kernels::conv_out_extent(wdt, k, *stride, *pad);
            let positions = oh * ow;
            let patch = ci * k * k;
            let mut col = vec![S::zero(); patch * positions];
            let mut dw = if w.node.track {
                Some(vec![S::zero(); co * patch])
            } else {
                None
            };
            let mut dx = if x.node.track {
                Some(vec![S::zero(); x.numel()])
            } else {
                None
            };
            let datx = x.data();
            let datw = w.data();
            let mut dcol = vec![S::zero(); patch * positions];
            for b in 0..bsz {
                let gb = &g[b * co * positions..(b + 1) * co * positions];
                if let Some(dw) = dw.as_mut() {
                    kernels::im2col(
                        &datx[b * ci * h * wdt..(b + 1) * ci * h * wdt],
                        ci,
                        h,
                        wdt,
                        k,
                        *stride,
                        *pad,
                        &mut col,
                    );
                    kernels::matmul_bt_acc(gb, &col, co, positions, patch, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.iter_mut().for_each(|v| *v = S::zero());
                    kernels::matmul_ta_acc(&datw, gb, co, patch, positions, &mut dcol);
                    kernels::col2im_acc(
                        &dcol,
                        ci,
                        h,
                        wdt,
                        k,
                        *stride,
                        *pad,
                        &mut dx[b * ci * h * wdt..(b + 1) * ci * h * wdt],
                    );
                }
            }
            drop(datx);
            drop(datw);
            if let Some(dw) = dw {
                add_into(grads, w, dw);
            }
            if let Some(dx) = dx {
                add_into(grads, x, dx);
            }
        }
        MaxPool { x, argmax } => {
            let mut dx = vec![S::zero(); x.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g[o];
            }
            add_into(grads, x, dx);
        }
        GlobalAvgPool { x } => {
            let sx = x.shape();
            let hw = sx[2] * sx[3];
            let inv = S::from_f64(1.0 / hw as f64);
            let mut dx = vec![S::zero(); x.numel()];
            for (i, d) in dx.iter_mut().enumerate() {
                *d = g[i / hw] * inv;
            }
            add_into(grads, x, dx);
        }
        Relu { x } => {
            let dxv = x.data();
            let dx = g
                .iter()
                .zip(dxv.iter())
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                .collect();
            drop(dxv);
            add_into(grads, x, dx);
        }
        Sigmoid { x } => {
            let y = out.data();
            let dx = g
                .iter()
                .zip(y.iter())
                .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                .collect();
            drop(y);
            add_into(grads, x, dx);
        }
        Softmax { x, axis } => {
            let sx = out.shape();
            let axis_len = sx[*axis];
            let inner: usize = sx[*axis + 1..].iter().product();
            let outer: usize = sx[..*axis].iter().product();
            let y = out.data();
            let mut dx = vec![S::zero(); out.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = S::zero();
                    for j in 0..axis_len {
                        let idx = base + j * inner;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..axis_len {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            drop(y);
            add_into(grads, x, dx);
        }
        LayerNorm { x, gain, bias, eps } => {
            let d = *x.shape().last().unwrap();
            let lanes = x.numel() / d;
            let inv_d = S::from_f64(1.0 / d as f64);
            let datx = x.data();
            let datg = gain.data();
            let mut dx = if x.node.track {
                Some(vec![S::zero(); x.numel()])
            } else {
                None
            };
            let mut dgain = vec![S::zero(); d];
            let mut dbias = vec![S::zero(); d];
            for l in 0..lanes {
                let xs = &datx[l * d..(l + 1) * d];
                let gs = &g[l * d..(l + 1) * d];
                let mut mean = S::zero();
                for &v in xs {
                    mean += v;
                }
                mean = mean * inv_d;
                let mut var = S::zero();
                for &v in xs {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let inv_std = S::one() / (var + *eps).sqrt();
                // x_hat, d x_hat, and the two lane means the LN gradient needs
                let mut mean_dxh = S::zero();
                let mut mean_dxh_xh = S::zero();
                for j in 0..d {
                    let xh = (xs[j] - mean) * inv_std;
                    let dxh = gs[j] * datg[j];
                    dgain[j] += gs[j] * xh;
                    dbias[j] += gs[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                mean_dxh = mean_dxh * inv_d;
                mean_dxh_xh = mean_dxh_xh * inv_d;
                if let Some(dx) = dx.as_mut() {
                    for j in 0..d {
                        let xh = (xs[j] - mean) * inv_std;
                        let dxh = gs[j] * datg[j];
                        dx[l * d + j] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std;
                    }
                }
            }
            drop(datx);
            drop(datg);
            if let Some(dx) = dx {
                add_into(grads, x, dx);
            }
            add_into(grads, gain, dgain);
            add_into(grads, bias, dbias);
        }
        Linear { x, w, b } => {
            let (n, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[0];
            if x.node.track {
                let mut dx = vec![S::zero(); n * din];
                kernels::matmul_acc(g, &w.data(), n, dout, din, &mut dx);
                add_into(grads, x, dx);
            }
            if w.node.track {
                let mut dw = vec![S::zero(); dout * din];
                kernels::matmul_ta_acc(g, &x.data(), n, dout, din, &mut dw);
                add_into(grads, w, dw);
            }
            if b.node.track {
                let mut db = vec![S::zero(); dout];
                for row in g.chunks(dout) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                add_into(grads, b, db);
            }
        }
        PerClassLinear { x, w, b } => {
            let (bsz, c, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let datx = x.data();
            let datw = w.data();
            if x.node.track {
                let mut dx = vec![S::zero(); x.numel()];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gv = g[bi * c + ci];
                        let wr = &datw[ci * d..(ci + 1) * d];
                        let dr = &mut dx[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                        for (dv, &wv) in dr.iter_mut().zip(wr) {
                            *dv += gv * wv;
                        }
                    }
                }
                add_into(grads, x, dx);
            }
            if w.node.track {
                let mut dw = vec![S::zero(); c * d];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gv = g[bi * c + ci];
                        let xr = &datx[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                        let dr = &mut dw[ci * d..(ci + 1) * d];
                        for (dv, &xv) in dr.iter_mut().zip(xr) {
                            *dv += gv * xv;
                        }
                    }
                }
                add_into(grads, w, dw);
            }
            if b.node.track {
                let mut db = vec![S::zero(); c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        db[ci] += g[bi * c + ci];
                    }
                }
                add_into(grads, b, db);
            }
        }
        Concat { parts, axis } => {
            let shape = out.shape();
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let row_out = shape[*axis] * inner;
            for (pi, p) in parts.iter().enumerate() {
                if !p.node.track {
                    continue;
                }
                let offset: usize = parts[..pi].iter().map(|q| q.shape()[*axis] * inner).sum();
                let pa = p.shape()[*axis];
                let mut dp = vec![S::zero(); p.numel()];
                for o in 0..outer {
                    dp[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(
                        &g[o * row_out + offset..o * row_out + offset + pa * inner],
                    );
                }
                add_into(grads, p, dp);
            }
        }
        Add { a, b } => {
            add_into(grads, a, g.to_vec());
            add_into(grads, b, g.to_vec());
        }
        Sub { a, b } => {
            add_into(grads, a, g.to_vec());
            add_into(grads, b, g.iter().map(|&v| -v).collect());
        }
        Mul { a, b } => {
            if a.node.track {
                let db = b.data();
                add_into(
                    grads,
                    a,
                    g.iter().zip(db.iter()).map(|(&gv, &bv)| gv * bv).collect(),
                );
            }
            if b.node.track {
                let da = a.data();
                add_into(
                    grads,
                    b,
                    g.iter().zip(da.iter()).map(|(&gv, &av)| gv * av).collect(),
                );
            }
        }
        AddBroadcast { x, b } => {
            add_into(grads, x, g.to_vec());
            if b.node.track {
                let n = b.numel();
                let mut db = vec![S::zero(); n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                add_into(grads, b, db);
            }
        }
        BroadcastBatch { x } => {
            let n = x.numel();
            let mut dx = vec![S::zero(); n];
            for (i, &gv) in g.iter().enumerate() {
                dx[i % n] += gv;
            }
            add_into(grads, x, dx);
        }
        ScaleChannels { x, g: gate } => {
            let hw = x.shape()[2] * x.shape()[3];
            if x.node.track {
                let dg = gate.data();
                add_into(
                    grads,
                    x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * dg[i / hw])
                        .collect(),
                );
            }
            if gate.node.track {
                let datx = x.data();
                let mut dgate = vec![S::zero(); gate.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    dgate[i / hw] += gv * datx[i];
                }
                add_into(grads, gate, dgate);
            }
        }
        ScaleSpatial { x, m } => {
            let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
            if x.node.track {
                let dm = m.data();
                add_into(
                    grads,
                    x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let b = i / (c * hw);
                            gv * dm[b * hw + i % hw]
                        })
                        .collect(),
                );
            }
            if m.node.track {
                let datx = x.data();
                let mut dm = vec![S::zero(); m.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    let b = i / (c * hw);
                    dm[b * hw + i % hw] += gv * datx[i];
                }
                add_into(grads, m, dm);
            }
        }
        AddChannelBias { x, b } => {
            add_into(grads, x, g.to_vec());
            if b.node.track {
                let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
                let mut db = vec![S::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    db[(i / hw) % c] += gv;
                }
                add_into(grads, b, db);
            }
        }
        MulRows { x, s } => {
            let n = x.shape()[1];
            if x.node.track {
                let ds = s.data();
                add_into(
                    grads,
                    x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * ds[i / n])
                        .collect(),
                );
            }
            if s.node.track {
                let dx = x.data();
                let mut dsg = vec![S::zero(); s.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    dsg[i / n] += gv * dx[i];
                }
                add_into(grads, s, dsg);
            }
        }
        AddScalar { x } => add_into(grads, x, g.to_vec()),
        MulScalar { x, c } => add_into(grads, x, g.iter().map(|&v| v * *c).collect()),
        Log { x } => {
            let datx = x.data();
            add_into(
                grads,
                x,
                g.iter().zip(datx.iter()).map(|(&gv, &xv)| gv / xv).collect(),
            );
        }
        Pow { x, e } => {
            if *e == S::zero() {
                return;
            }
            let datx = x.data();
            let em1 = *e - S::one();
            add_into(
                grads,
                x,
                g.iter()
                    .zip(datx.iter())
                    .map(|(&gv, &xv)| gv * *e * xv.powf(em1))
                    .collect(),
            );
        }
        Clamp { x, lo, hi } => {
            let datx = x.data();
            add_into(
                grads,
                x,
                g.iter()
                    .zip(datx.iter())
                    .map(|(&gv, &xv)| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect(),
            );
        }
        Mean { x } => {
            let inv = S::from_f64(1.0 / x.numel() as f64);
            add_into(grads, x, vec![g[0] * inv; x.numel()]);
        }
        Sum { x } => add_into(grads, x, vec![g[0]; x.numel()]),
        Reshape { x } => add_into(grads, x, g.to_vec()),
        TransposeLast2 { x } => {
            let so = out.shape();
            let (m, n) = (so[so.len() - 2], so[so.len() - 1]);
            let batch = out.numel() / (m * n);
            let mut dx = vec![S::zero(); x.numel()];
            for b in 0..batch {
                let src = &g[b * m * n..(b + 1) * m * n];
                let dst = &mut dx[b * m * n..(b + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            add_into(grads, x, dx);
        }
    }
}
