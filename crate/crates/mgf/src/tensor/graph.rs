//! Recorded-tape reverse-mode differentiation over coarse-grained ops.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves are constants or
//! named parameters pulled from a [`ParamStore`], interior nodes record the
//! op and its input ids, and [`Graph::backward`] walks the tape in reverse,
//! accumulating parameter gradients back into the store by name.

use super::ops::{self, BnCache, ConvSpec, LnCache};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{MgfError, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf {
        param: Option<String>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    BilinearResize {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    ChannelBias {
        x: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ReplicatePad {
        x: NodeId,
        pad: usize,
    },
    KernelMap {
        w: NodeId,
        triples: Vec<(usize, usize, f64)>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
        training: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LnCache,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    ScaleRows {
        w: NodeId,
        factors: Vec<f64>,
    },
    DiceLoss {
        p: NodeId,
        target: Tensor,
        eps: f64,
    },
    BceLoss {
        p: NodeId,
        target: Tensor,
    },
    SquareError {
        p: NodeId,
        target: f64,
    },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// A parameter leaf: the tensor is copied out of the store and its
    /// gradient is accumulated back under the same name by `backward`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        Ok(self.push(
            value,
            true,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            &spec,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.map(|id| self.needs(id)).unwrap_or(false);
        Ok(self.push(value, needs, Op::Conv2d { x, w, b, spec }))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::BilinearResize { x }))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = ops::maxpool2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = ops::sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid { x })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = ops::softmax(self.value(x), axis)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Softmax { x, axis }))
    }

    /// y = x W^T + b for x (n, f_in), w (f_out, f_in), b (f_out).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 {
            return Err(MgfError::shape_mismatch(format!(
                "linear expects 2-D x and w, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let (fout, wfin) = (wv.shape()[0], wv.shape()[1]);
        if fin != wfin || bv.shape() != [fout] {
            return Err(MgfError::shape_mismatch(format!(
                "linear shapes x{:?} w{:?} b{:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = ops::matmul_nt(xv.data(), wv.data(), n, fin, fout);
        for r in 0..n {
            for j in 0..fout {
                out[r * fout + j] += bv.data()[j];
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, needs, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(MgfError::shape_mismatch(format!(
                "matmul shapes {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let value = Tensor::new(vec![m, n], ops::matmul_nn(av.data(), bv.data(), m, k, n))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(MgfError::shape_mismatch(format!(
                "transpose expects 2-D, got {:?}",
                xv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(MgfError::shape_mismatch(format!(
                "add shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(MgfError::shape_mismatch(format!(
                "mul shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale { x, c })
    }

    /// Broadcast a per-channel bias over a 4-D activation.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 4 || bv.shape() != [xv.shape()[1]] {
            return Err(MgfError::shape_mismatch(format!(
                "channel_bias shapes {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = xv.data().to_vec();
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * h * w;
                let bias = bv.data()[ci];
                for v in &mut out[base..base + h * w] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, needs, Op::ChannelBias { x, b }))
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(MgfError::invalid_argument("concat of zero tensors"));
        }
        let first = self.value(xs[0]).shape().to_vec();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(MgfError::shape_mismatch(format!(
                    "concat_channels extents {:?} vs {:?}",
                    s, first
                )));
            }
            c_total += s[1];
        }
        let mut out = vec![0.0; n * c_total * h * w];
        for s in 0..n {
            let mut c_off = 0;
            for &id in xs {
                let xv = self.value(id);
                let c = xv.shape()[1];
                let src = &xv.data()[s * c * h * w..(s + 1) * c * h * w];
                let dst_base = (s * c_total + c_off) * h * w;
                out[dst_base..dst_base + c * h * w].copy_from_slice(src);
                c_off += c;
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], out)?;
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, needs, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Concatenate 2-D tensors side by side (same row count).
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(MgfError::invalid_argument("concat of zero tensors"));
        }
        let rows = self.value(xs[0]).shape()[0];
        let mut cols = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(MgfError::shape_mismatch(format!(
                    "concat_cols row counts differ: {:?}",
                    s
                )));
            }
            cols += s[1];
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut off = 0;
            for &id in xs {
                let xv = self.value(id);
                let c = xv.shape()[1];
                out[r * cols + off..r * cols + off + c]
                    .copy_from_slice(&xv.data()[r * c..(r + 1) * c]);
                off += c;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, needs, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Column slice of a 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        if start + len > cols {
            return Err(MgfError::invalid_argument(format!(
                "slice {}..{} out of {} columns",
                start,
                start + len,
                cols
            )));
        }
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SliceCols { x, start, len }))
    }

    /// Edge-replicated spatial padding of a 4-D tensor. Unlike zero padding
    /// this preserves constant images exactly, which the pixel-difference
    /// convolutions rely on.
    pub fn replicate_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(MgfError::shape_mismatch(format!(
                "replicate_pad expects 4-D, got {:?}",
                xv.shape()
            )));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let sy = (oy as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                for ox in 0..ow {
                    let sx = (ox as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                    dst[oy * ow + ox] = src[sy * w + sx];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::ReplicatePad { x, pad }))
    }

    /// Apply a linear per-slice map to a 4-D kernel tensor: for every
    /// (out, in) channel slice, `out[dst] += sign * w[src]` over the given
    /// (dst, src, sign) triples of flat tap indices. Used by the
    /// pixel-difference convolutions, whose kernel rewrite is linear.
    pub fn kernel_map(&mut self, w: NodeId, triples: &[(usize, usize, f64)]) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.shape().len() != 4 {
            return Err(MgfError::shape_mismatch(format!(
                "kernel_map expects a 4-D kernel, got {:?}",
                wv.shape()
            )));
        }
        let taps = wv.shape()[2] * wv.shape()[3];
        for &(d, s, _) in triples {
            if d >= taps || s >= taps {
                return Err(MgfError::invalid_argument(format!(
                    "kernel_map tap index out of range for {} taps",
                    taps
                )));
            }
        }
        let slices = wv.numel() / taps;
        let mut out = vec![0.0; wv.numel()];
        for s in 0..slices {
            let src = &wv.data()[s * taps..(s + 1) * taps];
            let dst = &mut out[s * taps..(s + 1) * taps];
            for &(d, wsrc, sign) in triples {
                dst[d] += sign * src[wsrc];
            }
        }
        let value = Tensor::new(wv.shape().to_vec(), out)?;
        let needs = self.needs(w);
        Ok(self.push(
            value,
            needs,
            Op::KernelMap {
                w,
                triples: triples.to_vec(),
            },
        ))
    }

    /// Batch norm; `running` carries (mean, var) for eval mode. Returns the
    /// node plus the batch statistics when training so the caller can update
    /// its running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Option<(Vec<f64>, Vec<f64>)>)> {
        let training = running.is_none();
        let (value, cache) = ops::batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            eps,
        )?;
        let stats = if training {
            Some((cache.mean.clone(), cache.var.clone()))
        } else {
            None
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            value,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                training,
            },
        );
        Ok((id, stats))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (value, cache) =
            ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), needs, Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total / n), needs, Op::Mean { x })
    }

    /// Mean over rows of a 2-D tensor, producing shape (1, d).
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(MgfError::shape_mismatch(format!(
                "mean_rows expects 2-D, got {:?}",
                xv.shape()
            )));
        }
        let (rows, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..rows {
            for j in 0..d {
                out[j] += xv.data()[r * d + j];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let value = Tensor::new(vec![1, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::MeanRows { x }))
    }

    /// Scale each row i of `w` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, w: NodeId, factors: &[f64]) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.shape().len() != 2 || wv.shape()[0] != factors.len() {
            return Err(MgfError::shape_mismatch(format!(
                "scale_rows: {} factors for shape {:?}",
                factors.len(),
                wv.shape()
            )));
        }
        let (rows, d) = (wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = wv.data()[r * d + j] * factors[r];
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let needs = self.needs(w);
        Ok(self.push(
            value,
            needs,
            Op::ScaleRows {
                w,
                factors: factors.to_vec(),
            },
        ))
    }

    /// Dice loss 1 - (2*sum(pq) + eps) / (sum(p^2) + sum(q^2) + eps).
    pub fn dice_loss(&mut self, p: NodeId, target: &Tensor, eps: f64) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(MgfError::shape_mismatch(format!(
                "dice_loss shapes {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let mut s_pq = 0.0;
        let mut s_pp = 0.0;
        let mut s_qq = 0.0;
        for (x, y) in pv.data().iter().zip(target.data()) {
            s_pq += x * y;
            s_pp += x * x;
            s_qq += y * y;
        }
        let coeff = (2.0 * s_pq + eps) / (s_pp + s_qq + eps);
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(1.0 - coeff),
            needs,
            Op::DiceLoss {
                p,
                target: target.clone(),
                eps,
            },
        ))
    }

    /// Mean binary cross entropy with predictions clamped to
    /// [1e-7, 1 - 1e-7].
    pub fn bce_loss(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(MgfError::shape_mismatch(format!(
                "bce_loss shapes {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let mut total = 0.0;
        for (x, y) in pv.data().iter().zip(target.data()) {
            let xc = x.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * xc.ln() + (1.0 - y) * (1.0 - xc).ln();
        }
        let n = pv.numel() as f64;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(total / n),
            needs,
            Op::BceLoss {
                p,
                target: target.clone(),
            },
        ))
    }

    /// (p - target)^2 for a one-element node.
    pub fn square_error(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.numel() != 1 {
            return Err(MgfError::shape_mismatch(format!(
                "square_error expects one element, got {:?}",
                pv.shape()
            )));
        }
        let d = pv.data()[0] - target;
        let needs = self.needs(p);
        Ok(self.push(Tensor::scalar(d * d), needs, Op::SquareError { p, target }))
    }

    /// Reverse pass from a scalar loss; parameter gradients are accumulated
    /// into the store under their leaf names.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MgfError::invalid_argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).item().is_finite() {
            return Err(MgfError::InvalidState(
                "loss is not finite; training diverged".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut grads)?;
            if let Op::Leaf { param: Some(name) } = &self.nodes[i].op {
                store.accumulate_grad(name, &dy)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, spec } => {
                let want_dx = self.needs(*x);
                let (dx, dw, db) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), dy, spec, want_dx)?;
                if let Some(dx) = dx {
                    add_to(grads, *x, dx);
                }
                if self.needs(*w) {
                    add_to(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        add_to(grads, *b, db);
                    }
                }
            }
            Op::BilinearResize { x } => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let dx = ops::bilinear_resize_backward(dy, xs[2], xs[3])?;
                    add_to(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += dy.data()[o];
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_to(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let sv = &self.nodes[i].value;
                    let data = sv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect();
                    add_to(grads, *x, Tensor::new(sv.shape().to_vec(), data)?);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    add_to(
                        grads,
                        *x,
                        ops::softmax_backward(&self.nodes[i].value, dy, *axis),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.needs(*x) {
                    let dx = ops::matmul_nn(dy.data(), wv.data(), n, fout, fin);
                    add_to(grads, *x, Tensor::new(vec![n, fin], dx)?);
                }
                if self.needs(*w) {
                    let dw = ops::matmul_tn(dy.data(), xv.data(), fout, n, fin);
                    add_to(grads, *w, Tensor::new(vec![fout, fin], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; fout];
                    for r in 0..n {
                        for j in 0..fout {
                            db[j] += dy.data()[r * fout + j];
                        }
                    }
                    add_to(grads, *b, Tensor::new(vec![fout], db)?);
                }
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // da = dy (m,n) * b(k,n)^T
                    let da = ops::matmul_nt(dy.data(), bv.data(), m, n, k);
                    add_to(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let db = ops::matmul_tn(av.data(), dy.data(), k, m, n);
                    add_to(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let (r, c) = (dy.shape()[0], dy.shape()[1]);
                    let mut dx = vec![0.0; r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            dx[j * r + i2] = dy.data()[i2 * c + j];
                        }
                    }
                    add_to(grads, *x, Tensor::new(vec![c, r], dx)?);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    add_to(grads, *b, dy.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let data = dy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                    add_to(grads, *a, Tensor::new(dy.shape().to_vec(), data)?);
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let data = dy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                    add_to(grads, *b, Tensor::new(dy.shape().to_vec(), data)?);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    add_to(grads, *x, dy.map(|v| v * c));
                }
            }
            Op::ChannelBias { x, b } => {
                if self.needs(*x) {
                    add_to(grads, *x, dy.clone());
                }
                if self.needs(*b) {
                    let (n, c, h, w) = (
                        dy.shape()[0],
                        dy.shape()[1],
                        dy.shape()[2],
                        dy.shape()[3],
                    );
                    let mut db = vec![0.0; c];
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * h * w;
                            for v in &dy.data()[base..base + h * w] {
                                db[ci] += v;
                            }
                        }
                    }
                    add_to(grads, *b, Tensor::new(vec![c], db)?);
                }
            }
            Op::ConcatChannels { xs } => {
                let (n, c_total, h, w) = (
                    dy.shape()[0],
                    dy.shape()[1],
                    dy.shape()[2],
                    dy.shape()[3],
                );
                let mut c_off = 0;
                for &id in xs {
                    let c = self.value(id).shape()[1];
                    if self.needs(id) {
                        let mut dx = vec![0.0; n * c * h * w];
                        for s in 0..n {
                            let src = (s * c_total + c_off) * h * w;
                            let dst = s * c * h * w;
                            dx[dst..dst + c * h * w]
                                .copy_from_slice(&dy.data()[src..src + c * h * w]);
                        }
                        add_to(grads, id, Tensor::new(vec![n, c, h, w], dx)?);
                    }
                    c_off += c;
                }
            }
            Op::ConcatCols { xs } => {
                let (rows, cols) = (dy.shape()[0], dy.shape()[1]);
                let mut off = 0;
                for &id in xs {
                    let c = self.value(id).shape()[1];
                    if self.needs(id) {
                        let mut dx = vec![0.0; rows * c];
                        for r in 0..rows {
                            dx[r * c..(r + 1) * c]
                                .copy_from_slice(&dy.data()[r * cols + off..r * cols + off + c]);
                        }
                        add_to(grads, id, Tensor::new(vec![rows, c], dx)?);
                    }
                    off += c;
                }
            }
            Op::ReplicatePad { x, pad } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                    let mut dx = vec![0.0; xv.numel()];
                    for plane in 0..n * c {
                        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            let sy = (oy as isize - *pad as isize).clamp(0, h as isize - 1) as usize;
                            for ox in 0..ow {
                                let sx =
                                    (ox as isize - *pad as isize).clamp(0, w as isize - 1) as usize;
                                dst[sy * w + sx] += src[oy * ow + ox];
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::KernelMap { w, triples } => {
                if self.needs(*w) {
                    let wv = self.value(*w);
                    let taps = wv.shape()[2] * wv.shape()[3];
                    let slices = wv.numel() / taps;
                    let mut dw = vec![0.0; wv.numel()];
                    for s in 0..slices {
                        let src = &dy.data()[s * taps..(s + 1) * taps];
                        let dst = &mut dw[s * taps..(s + 1) * taps];
                        for &(d, wsrc, sign) in triples {
                            dst[wsrc] += sign * src[d];
                        }
                    }
                    add_to(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
                    }
                    add_to(grads, *x, Tensor::new(vec![rows, cols], dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                training,
            } => {
                let (dx, dgamma, dbeta) = if *training {
                    ops::batch_norm_backward(self.value(*x), self.value(*gamma), cache, dy)
                } else {
                    ops::batch_norm_eval_backward(self.value(*x), self.value(*gamma), cache, dy)
                };
                if self.needs(*x) {
                    add_to(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    add_to(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) =
                    ops::layer_norm_backward(self.value(*x), self.value(*gamma), cache, dy);
                if self.needs(*x) {
                    add_to(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    add_to(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = dy.item();
                    add_to(grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel() as f64;
                    add_to(grads, *x, Tensor::full(self.value(*x).shape(), dy.item() / n));
                }
            }
            Op::MeanRows { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (rows, d) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        for j in 0..d {
                            dx[r * d + j] = dy.data()[j] / rows as f64;
                        }
                    }
                    add_to(grads, *x, Tensor::new(vec![rows, d], dx)?);
                }
            }
            Op::ScaleRows { w, factors } => {
                if self.needs(*w) {
                    let d = dy.shape()[1];
                    let mut dw = vec![0.0; dy.numel()];
                    for (r, &f) in factors.iter().enumerate() {
                        for j in 0..d {
                            dw[r * d + j] = dy.data()[r * d + j] * f;
                        }
                    }
                    add_to(grads, *w, Tensor::new(dy.shape().to_vec(), dw)?);
                }
            }
            Op::DiceLoss { p, target, eps } => {
                if self.needs(*p) {
                    let pv = self.value(*p);
                    let mut s_pq = 0.0;
                    let mut s_pp = 0.0;
                    let mut s_qq = 0.0;
                    for (x, y) in pv.data().iter().zip(target.data()) {
                        s_pq += x * y;
                        s_pp += x * x;
                        s_qq += y * y;
                    }
                    let denom = s_pp + s_qq + eps;
                    let num = 2.0 * s_pq + eps;
                    let g = dy.item();
                    // d(1 - num/denom)/dp_i = -(2 q_i denom - num 2 p_i)/denom^2
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &y)| -g * (2.0 * y * denom - num * 2.0 * x) / (denom * denom))
                        .collect();
                    add_to(grads, *p, Tensor::new(pv.shape().to_vec(), data)?);
                }
            }
            Op::BceLoss { p, target } => {
                if self.needs(*p) {
                    let pv = self.value(*p);
                    let n = pv.numel() as f64;
                    let g = dy.item();
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &y)| {
                            if x <= BCE_CLAMP || x >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                -g * (y / x - (1.0 - y) / (1.0 - x)) / n
                            }
                        })
                        .collect();
                    add_to(grads, *p, Tensor::new(pv.shape().to_vec(), data)?);
                }
            }
            Op::SquareError { p, target } => {
                if self.needs(*p) {
                    let pv = self.value(*p);
                    let d = pv.data()[0] - target;
                    add_to(grads, *p, Tensor::scalar(2.0 * d * dy.item()));
                }
            }
        }
        Ok(())
    }
}

const BCE_CLAMP: f64 = 1e-7;
