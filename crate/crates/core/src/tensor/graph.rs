//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order; backward walks them in reverse
//! insertion order exactly once. Every op output owns its buffer — there are
//! no aliasing views — which keeps the backward pass a pure scatter/gather
//! over saved activations.

use rayon::prelude::*;

use super::kernels;
use super::{strides_of, Element, TResult, Tensor, TensorError};
use crate::runtime;

pub type NodeId = usize;

/// Recorded operation. Inputs are node ids; anything else an op needs for
/// its backward pass (saved im2col buffers, permutations) is stored inline.
#[derive(Debug)]
pub enum Op<E: Element> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// scale * x + offset, elementwise with constants.
    Affine {
        x: NodeId,
        scale: f64,
        offset: f64,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        /// im2col buffer saved by the forward pass, [B, C_in*kh*kw, oh*ow].
        col: Vec<E>,
    },
    ChannelAffine {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    ChannelMul {
        x: NodeId,
        w: NodeId,
    },
    Gap(NodeId),
    BilinearUp(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Stack {
        inputs: Vec<NodeId>,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
}

#[derive(Debug)]
pub struct Node<E: Element> {
    pub value: Tensor<E>,
    pub op: Op<E>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<E>>,
}

/// Computation graph for one forward/backward execution.
#[derive(Debug, Default)]
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.nodes[id].grad.take()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Insert a leaf holding `value`. Gradients are accumulated for it during
    /// backward iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> TResult<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::dim(
                op,
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TResult<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TResult<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TResult<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, offset: f64) -> TResult<NodeId> {
        let (s, o) = (E::from_f64(scale), E::from_f64(offset));
        let data = self.value(x).data().iter().map(|&v| s * v + o).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Affine { x, scale, offset }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> TResult<NodeId> {
        let data = self.value(x).data().iter().map(|&v| v.max(E::ZERO)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> TResult<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                // Split by sign so exp never overflows.
                if v >= E::ZERO {
                    E::ONE / (E::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (E::ONE + e)
                }
            })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    pub fn log(&mut self, x: NodeId) -> TResult<NodeId> {
        let data = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Log(x), rg))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> TResult<NodeId> {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let data = self.value(x).data().iter().map(|&v| v.max(l).min(h)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Clamp { x, lo, hi }, rg))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> TResult<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or_else(|| {
            TensorError::dim("softmax_rows", "input must have at least one axis".to_string())
        })?;
        let mut data = self.value(x).data().to_vec();
        kernels::softmax_rows_inplace(&mut data, n);
        let t = Tensor::new(shape, data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// Batched matrix product: [..., M, K] x [..., K, N] -> [..., M, N].
    /// Leading batch axes must match exactly; no broadcasting.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TResult<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::dim(
                "matmul",
                format!("operands must be at least rank 2, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", sa, sb),
            ));
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(TensorError::dim(
                "matmul",
                format!("batch dimensions differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![E::ZERO; batch * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for s in 0..batch {
            kernels::matmul_nn(
                &da[s * m * k..(s + 1) * m * k],
                &db[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(t, Op::Matmul { a, b, batch, m, k, n }, rg))
    }

    /// Affine map: x[B,K] * w[K,N] + bias[N].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> TResult<NodeId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(TensorError::dim(
                "linear",
                format!("x {:?}, weight {:?}, bias {:?} are inconsistent", sx, sw, sb),
            ));
        }
        let (bsz, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![E::ZERO; bsz * n];
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bias);
        }
        kernels::matmul_nn(self.value(x).data(), self.value(w).data(), bsz, k, n, &mut out);
        let t = Tensor::new(vec![bsz, n], out)?;
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution, zero padding: x[B,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::dim(
                "conv2d",
                format!("input {:?} and weight {:?} must be rank 4", sx, sw),
            ));
        }
        if sx[1] != sw[1] {
            return Err(TensorError::dim(
                "conv2d",
                format!("input channels disagree: input shape {:?} vs weight shape {:?}", sx, sw),
            ));
        }
        if sb != [sw[0]] {
            return Err(TensorError::dim(
                "conv2d",
                format!("bias {:?} must be [{}]", sb, sw[0]),
            ));
        }
        if stride < 1 {
            return Err(TensorError::contract("conv2d", "stride must be >= 1".to_string()));
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * padding, wd + 2 * padding),
            ));
        }
        let oh = kernels::conv_out_len(h, kh, stride, padding);
        let ow = kernels::conv_out_len(wd, kw, stride, padding);
        let kprime = cin * kh * kw;
        let l = oh * ow;
        let mut col = vec![E::ZERO; bsz * kprime * l];
        let xd = self.value(x).data();
        for s in 0..bsz {
            kernels::im2col(
                &xd[s * cin * h * wd..(s + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                padding,
                &mut col[s * kprime * l..(s + 1) * kprime * l],
            );
        }
        let wd_mat = self.value(w).data();
        let bias = self.value(b).data().to_vec();
        let mut out = vec![E::ZERO; bsz * cout * l];
        for s in 0..bsz {
            let dst = &mut out[s * cout * l..(s + 1) * cout * l];
            for (o, row) in dst.chunks_mut(l).enumerate() {
                let bv = bias[o];
                for v in row.iter_mut() {
                    *v = bv;
                }
            }
            kernels::matmul_nn(wd_mat, &col[s * kprime * l..(s + 1) * kprime * l], cout, kprime, l, dst);
        }
        let t = Tensor::new(vec![bsz, cout, oh, ow], out)?;
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                col,
            },
            rg,
        ))
    }

    /// Per-channel scale and shift: y[b,c,h,w] = x * scale[c] + shift[c].
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::dim("channel_affine", format!("input {:?} must be rank 4", sx)));
        }
        let c = sx[1];
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(TensorError::dim(
                "channel_affine",
                format!(
                    "scale {:?} / shift {:?} must be [{}]",
                    self.value(scale).shape(),
                    self.value(shift).shape(),
                    c
                ),
            ));
        }
        let hw = sx[2] * sx[3];
        let mut out = self.value(x).data().to_vec();
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        for (plane_idx, plane) in out.chunks_mut(hw).enumerate() {
            let ci = plane_idx % c;
            let (s, o) = (sc[ci], sh[ci]);
            for v in plane.iter_mut() {
                *v = *v * s + o;
            }
        }
        let t = Tensor::new(sx, out)?;
        let rg = self.needs_grad(&[x, scale, shift]);
        Ok(self.push(t, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Channel-wise multiplication: y[b,c,h,w] = x[b,c,h,w] * w[b,c].
    pub fn channel_mul(&mut self, x: NodeId, w: NodeId) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 2 || sw[0] != sx[0] || sw[1] != sx[1] {
            return Err(TensorError::dim(
                "channel_mul",
                format!("input {:?} requires weights [B,C], got {:?}", sx, sw),
            ));
        }
        let hw = sx[2] * sx[3];
        let mut out = self.value(x).data().to_vec();
        let wd = self.value(w).data();
        for (plane_idx, plane) in out.chunks_mut(hw).enumerate() {
            let s = wd[plane_idx];
            for v in plane.iter_mut() {
                *v = *v * s;
            }
        }
        let t = Tensor::new(sx, out)?;
        let rg = self.needs_grad(&[x, w]);
        Ok(self.push(t, Op::ChannelMul { x, w }, rg))
    }

    /// Global average pooling: [B,C,H,W] -> [B,C].
    pub fn gap(&mut self, x: NodeId) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::dim("gap", format!("input {:?} must be rank 4", sx)));
        }
        let hw = sx[2] * sx[3];
        let inv = E::from_f64(1.0 / hw as f64);
        let data: Vec<E> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| {
                let mut s = E::ZERO;
                for &v in plane {
                    s += v;
                }
                s * inv
            })
            .collect();
        let t = Tensor::new(vec![sx[0], sx[1]], data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Gap(x), rg))
    }

    /// Bilinear upsample (align-corners=false) of [B,C,H,W] to [B,C,oh,ow].
    pub fn bilinear_up(&mut self, x: NodeId, oh: usize, ow: usize) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::dim("bilinear_up", format!("input {:?} must be rank 4", sx)));
        }
        let (h, w) = (sx[2], sx[3]);
        if oh < h || ow < w {
            return Err(TensorError::contract(
                "bilinear_up",
                format!("target {}x{} must not shrink input {}x{}", oh, ow, h, w),
            ));
        }
        let planes = sx[0] * sx[1];
        let mut out = vec![E::ZERO; planes * oh * ow];
        let xd = self.value(x).data();
        let work = |(dst, src): (&mut [E], &[E])| kernels::bilinear_plane(src, h, w, oh, ow, dst);
        if runtime::parallel() && planes > 2 {
            runtime::install(|| {
                out.par_chunks_mut(oh * ow)
                    .zip(xd.par_chunks(h * w))
                    .for_each(work);
            });
        } else {
            out.chunks_mut(oh * ow).zip(xd.chunks(h * w)).for_each(work);
        }
        let t = Tensor::new(vec![sx[0], sx[1], oh, ow], out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::BilinearUp(x), rg))
    }

    /// Concatenate along `axis`. Shapes must agree on every other axis.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> TResult<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::contract("concat", "needs at least one input".to_string()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::dim(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} on axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let e = self.value(id).shape()[axis];
            let src = self.value(id).data();
            for o in 0..outer {
                let dst_start = o * axis_total * inner + offset * inner;
                let src_start = o * e * inner;
                out[dst_start..dst_start + e * inner]
                    .copy_from_slice(&src[src_start..src_start + e * inner]);
            }
            offset += e;
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.needs_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[NodeId]) -> TResult<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::contract("stack", "needs at least one input".to_string()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let numel = self.value(inputs[0]).numel();
        let mut out = Vec::with_capacity(inputs.len() * numel);
        for &id in inputs {
            if self.value(id).shape() != first {
                return Err(TensorError::dim(
                    "stack",
                    format!("shape {:?} differs from {:?}", self.value(id).shape(), first),
                ));
            }
            out.extend_from_slice(self.value(id).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&first);
        let t = Tensor::new(shape, out)?;
        let rg = self.needs_grad(inputs);
        Ok(self.push(
            t,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() {
            return Err(TensorError::dim(
                "mean_axis",
                format!("axis {} out of range for shape {:?}", axis, sx),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let inv = E::from_f64(1.0 / len as f64);
        let mut out = vec![E::ZERO; outer * inner];
        let xd = self.value(x).data();
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut shape = sx[..axis].to_vec();
        shape.extend_from_slice(&sx[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::MeanAxis { x, axis }, rg))
    }

    /// Sum of all elements -> scalar [1].
    pub fn sum_all(&mut self, x: NodeId) -> TResult<NodeId> {
        let mut s = E::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    /// Mean of all elements -> scalar [1].
    pub fn mean_all(&mut self, x: NodeId) -> TResult<NodeId> {
        let n = self.value(x).numel();
        let mut s = E::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let t = Tensor::scalar(s * E::from_f64(1.0 / n as f64));
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::MeanAll(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> TResult<NodeId> {
        let t = Tensor::new(shape.clone(), self.value(x).data().to_vec()).map_err(|_| {
            TensorError::dim(
                "reshape",
                format!(
                    "cannot reshape {:?} to {:?} (element counts differ)",
                    self.value(x).shape(),
                    shape
                ),
            )
        })?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Axis permutation: out axis i is input axis perm[i].
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> TResult<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim(
                "permute",
                format!("{:?} is not a permutation of axes of {:?}", perm, sx),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_gather(self.value(x).data(), &sx, perm, &out_shape);
        let t = Tensor::new(out_shape, out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<E>) {
        debug_assert_eq!(self.nodes[id].value.shape(), delta.shape());
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => self.nodes[id].grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires_grad leaf; intermediate grads are dropped as they are
    /// consumed.
    pub fn backward(&mut self, loss: NodeId) -> TResult<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss].requires_grad {
            return Err(TensorError::contract(
                "backward",
                "loss does not depend on any requires_grad leaf".to_string(),
            ));
        }
        self.nodes[loss].grad = Some(Tensor::ones(self.value(loss).shape().to_vec()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                self.nodes[id].grad = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.backprop_node(id, g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: NodeId, g: Tensor<E>) -> TResult<()> {
        // The op is moved out so `self` can be borrowed mutably for
        // accumulation; it is restored afterwards (minus saved buffers that
        // are no longer needed).
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!("leaves are not backpropagated"),
            &Op::Add(a, b) => {
                if self.nodes[a].requires_grad {
                    self.accumulate(a, g.clone());
                }
                if self.nodes[b].requires_grad {
                    self.accumulate(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.nodes[a].requires_grad {
                    self.accumulate(a, g.clone());
                }
                if self.nodes[b].requires_grad {
                    let neg = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| -v).collect(),
                    )?;
                    self.accumulate(b, neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect(),
                    )?;
                    self.accumulate(a, da);
                }
                if self.nodes[b].requires_grad {
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect(),
                    )?;
                    self.accumulate(b, db);
                }
            }
            &Op::Affine { x, scale, .. } => {
                let s = E::from_f64(scale);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * s).collect(),
                )?;
                self.accumulate(x, dx);
            }
            &Op::Relu(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| if xv > E::ZERO { gv } else { E::ZERO })
                        .collect(),
                )?;
                self.accumulate(x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(id).data())
                        .map(|(&gv, &yv)| gv * yv * (E::ONE - yv))
                        .collect(),
                )?;
                self.accumulate(x, dx);
            }
            &Op::Log(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| gv / xv)
                        .collect(),
                )?;
                self.accumulate(x, dx);
            }
            &Op::Clamp { x, lo, hi } => {
                let (l, h) = (E::from_f64(lo), E::from_f64(hi));
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| if xv > l && xv < h { gv } else { E::ZERO })
                        .collect(),
                )?;
                self.accumulate(x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let n = *self.value(id).shape().last().unwrap();
                let y = self.value(id).data();
                let mut dx = vec![E::ZERO; y.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.data().chunks(n)) {
                    let mut dot = E::ZERO;
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                let dx = Tensor::new(self.value(x).shape().to_vec(), dx)?;
                self.accumulate(x, dx);
            }
            &Op::Matmul { a, b, batch, m, k, n } => {
                if self.nodes[a].requires_grad {
                    // dA = dC * B^T, via explicit transpose of each B slice.
                    let db_src = self.value(b).data();
                    let mut da = vec![E::ZERO; batch * m * k];
                    let mut bt = vec![E::ZERO; k * n];
                    for s in 0..batch {
                        kernels::transpose2d(&db_src[s * k * n..(s + 1) * k * n], k, n, &mut bt);
                        kernels::matmul_nn(
                            &g.data()[s * m * n..(s + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    self.accumulate(a, Tensor::new(self.value(a).shape().to_vec(), da)?);
                }
                if self.nodes[b].requires_grad {
                    let da_src = self.value(a).data();
                    let mut db = vec![E::ZERO; batch * k * n];
                    for s in 0..batch {
                        kernels::matmul_tn(
                            &da_src[s * m * k..(s + 1) * m * k],
                            &g.data()[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[s * k * n..(s + 1) * k * n],
                        );
                    }
                    self.accumulate(b, Tensor::new(self.value(b).shape().to_vec(), db)?);
                }
            }
            &Op::Linear { x, w, b } => {
                let (bsz, k) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let n = self.value(w).shape()[1];
                if self.nodes[x].requires_grad {
                    let mut wt = vec![E::ZERO; k * n];
                    kernels::transpose2d(self.value(w).data(), k, n, &mut wt);
                    let mut dx = vec![E::ZERO; bsz * k];
                    kernels::matmul_nn(g.data(), &wt, bsz, n, k, &mut dx);
                    self.accumulate(x, Tensor::new(vec![bsz, k], dx)?);
                }
                if self.nodes[w].requires_grad {
                    let mut dw = vec![E::ZERO; k * n];
                    kernels::matmul_tn(self.value(x).data(), g.data(), bsz, k, n, &mut dw);
                    self.accumulate(w, Tensor::new(vec![k, n], dw)?);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![E::ZERO; n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, Tensor::new(vec![n], db)?);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                col,
            } => {
                let (x, w, b, stride, padding) = (*x, *w, *b, *stride, *padding);
                let sx = self.value(x).shape().to_vec();
                let sw = self.value(w).shape().to_vec();
                let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let kprime = cin * kh * kw;
                let oh = self.value(id).shape()[2];
                let ow = self.value(id).shape()[3];
                let l = oh * ow;
                if self.nodes[w].requires_grad {
                    let mut dw = vec![E::ZERO; cout * kprime];
                    let mut colt = vec![E::ZERO; kprime * l];
                    for s in 0..bsz {
                        kernels::transpose2d(&col[s * kprime * l..(s + 1) * kprime * l], kprime, l, &mut colt);
                        kernels::matmul_nn(
                            &g.data()[s * cout * l..(s + 1) * cout * l],
                            &colt,
                            cout,
                            l,
                            kprime,
                            &mut dw,
                        );
                    }
                    self.accumulate(w, Tensor::new(sw.clone(), dw)?);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![E::ZERO; cout];
                    for s in 0..bsz {
                        for (o, d) in db.iter_mut().enumerate() {
                            let row = &g.data()[(s * cout + o) * l..(s * cout + o + 1) * l];
                            for &v in row {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(b, Tensor::new(vec![cout], db)?);
                }
                if self.nodes[x].requires_grad {
                    let wmat = self.value(w).data().to_vec();
                    let mut dx = vec![E::ZERO; bsz * cin * h * wd];
                    let mut dcol = vec![E::ZERO; kprime * l];
                    for s in 0..bsz {
                        for v in dcol.iter_mut() {
                            *v = E::ZERO;
                        }
                        kernels::matmul_tn(
                            &wmat,
                            &g.data()[s * cout * l..(s + 1) * cout * l],
                            cout,
                            kprime,
                            l,
                            &mut dcol,
                        );
                        kernels::col2im(
                            &dcol,
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            padding,
                            &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                        );
                    }
                    self.accumulate(x, Tensor::new(sx, dx)?);
                }
                // col buffer is dropped with `op` here.
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let sx = self.value(x).shape().to_vec();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                if self.nodes[x].requires_grad {
                    let sc = self.value(scale).data().to_vec();
                    let mut dx = g.data().to_vec();
                    for (plane_idx, plane) in dx.chunks_mut(hw).enumerate() {
                        let s = sc[plane_idx % c];
                        for v in plane.iter_mut() {
                            *v = *v * s;
                        }
                    }
                    self.accumulate(x, Tensor::new(sx.clone(), dx)?);
                }
                if self.nodes[scale].requires_grad {
                    let xd = self.value(x).data();
                    let mut ds = vec![E::ZERO; c];
                    for (plane_idx, plane) in g.data().chunks(hw).enumerate() {
                        let xs = &xd[plane_idx * hw..(plane_idx + 1) * hw];
                        let acc = &mut ds[plane_idx % c];
                        for (&gv, &xv) in plane.iter().zip(xs) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(scale, Tensor::new(vec![c], ds)?);
                }
                if self.nodes[shift].requires_grad {
                    let mut dsh = vec![E::ZERO; c];
                    for (plane_idx, plane) in g.data().chunks(hw).enumerate() {
                        let acc = &mut dsh[plane_idx % c];
                        for &gv in plane {
                            *acc += gv;
                        }
                    }
                    self.accumulate(shift, Tensor::new(vec![c], dsh)?);
                }
            }
            &Op::ChannelMul { x, w } => {
                let sx = self.value(x).shape().to_vec();
                let hw = sx[2] * sx[3];
                if self.nodes[x].requires_grad {
                    let wd = self.value(w).data().to_vec();
                    let mut dx = g.data().to_vec();
                    for (plane_idx, plane) in dx.chunks_mut(hw).enumerate() {
                        let s = wd[plane_idx];
                        for v in plane.iter_mut() {
                            *v = *v * s;
                        }
                    }
                    self.accumulate(x, Tensor::new(sx.clone(), dx)?);
                }
                if self.nodes[w].requires_grad {
                    let xd = self.value(x).data();
                    let mut dw = vec![E::ZERO; sx[0] * sx[1]];
                    for (plane_idx, plane) in g.data().chunks(hw).enumerate() {
                        let xs = &xd[plane_idx * hw..(plane_idx + 1) * hw];
                        let acc = &mut dw[plane_idx];
                        for (&gv, &xv) in plane.iter().zip(xs) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(w, Tensor::new(vec![sx[0], sx[1]], dw)?);
                }
            }
            &Op::Gap(x) => {
                let sx = self.value(x).shape().to_vec();
                let hw = sx[2] * sx[3];
                let inv = E::from_f64(1.0 / hw as f64);
                let mut dx = vec![E::ZERO; self.value(x).numel()];
                for (plane_idx, plane) in dx.chunks_mut(hw).enumerate() {
                    let gv = g.data()[plane_idx] * inv;
                    for v in plane.iter_mut() {
                        *v = gv;
                    }
                }
                self.accumulate(x, Tensor::new(sx, dx)?);
            }
            &Op::BilinearUp(x) => {
                let sx = self.value(x).shape().to_vec();
                let (h, w) = (sx[2], sx[3]);
                let so = self.value(id).shape().to_vec();
                let (oh, ow) = (so[2], so[3]);
                let mut dx = vec![E::ZERO; self.value(x).numel()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    kernels::bilinear_plane_backward(src, h, w, oh, ow, dst);
                }
                self.accumulate(x, Tensor::new(sx, dx)?);
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let so = self.value(id).shape().to_vec();
                let outer: usize = so[..axis].iter().product();
                let inner: usize = so[axis + 1..].iter().product();
                let axis_total = so[axis];
                let mut offset = 0usize;
                for &inp in &inputs {
                    let e = self.value(inp).shape()[axis];
                    if self.nodes[inp].requires_grad {
                        let mut d = vec![E::ZERO; outer * e * inner];
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + offset * inner;
                            let dst_start = o * e * inner;
                            d[dst_start..dst_start + e * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + e * inner]);
                        }
                        self.accumulate(inp, Tensor::new(self.value(inp).shape().to_vec(), d)?);
                    }
                    offset += e;
                }
            }
            Op::Stack { inputs } => {
                let inputs = inputs.clone();
                let numel = self.value(inputs[0]).numel();
                for (i, &inp) in inputs.iter().enumerate() {
                    if self.nodes[inp].requires_grad {
                        let d = g.data()[i * numel..(i + 1) * numel].to_vec();
                        self.accumulate(inp, Tensor::new(self.value(inp).shape().to_vec(), d)?);
                    }
                }
            }
            &Op::MeanAxis { x, axis } => {
                let sx = self.value(x).shape().to_vec();
                let outer: usize = sx[..axis].iter().product();
                let len = sx[axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let inv = E::from_f64(1.0 / len as f64);
                let mut dx = vec![E::ZERO; self.value(x).numel()];
                for o in 0..outer {
                    let grow = &g.data()[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(x, Tensor::new(sx, dx)?);
            }
            &Op::SumAll(x) => {
                let gv = g.data()[0];
                let dx = Tensor::full(self.value(x).shape().to_vec(), gv);
                self.accumulate(x, dx);
            }
            &Op::MeanAll(x) => {
                let gv = g.data()[0] * E::from_f64(1.0 / self.value(x).numel() as f64);
                let dx = Tensor::full(self.value(x).shape().to_vec(), gv);
                self.accumulate(x, dx);
            }
            &Op::Reshape(x) => {
                let dx = Tensor::new(self.value(x).shape().to_vec(), g.data().to_vec())?;
                self.accumulate(x, dx);
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let sx = self.value(x).shape().to_vec();
                // Inverse permutation maps output grads back to input layout.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute_gather(g.data(), g.shape(), &inv, &sx);
                self.accumulate(x, Tensor::new(sx, dx)?);
            }
        }
        // Restore the op record (saved buffers were consumed above).
        if !matches!(op, Op::Conv2d { .. }) {
            self.nodes[id].op = op;
        }
        Ok(())
    }
}

/// Gather-based axis permutation: out axis i draws from input axis perm[i].
fn permute_gather<E: Element>(
    src: &[E],
    src_shape: &[usize],
    perm: &[usize],
    out_shape: &[usize],
) -> Vec<E> {
    let rank = src_shape.len();
    let src_strides = strides_of(src_shape);
    // Stride in the source for a step along each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for _ in 0..numel {
        out.push(src[src_off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src_off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_kernel_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.13).sin()).collect();
        let x = g.constant(t(&[2, 3, 4, 5], &data));
        // 1x1 kernel selecting channel c with weight 1 is identity per channel.
        let mut wdat = vec![0.0; 3 * 3];
        for c in 0..3 {
            wdat[c * 3 + c] = 1.0;
        }
        let w = g.constant(t(&[3, 3, 1, 1], &wdat));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    /// Direct quadruple-loop convolution oracle, independent of im2col.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Tensor<f64> {
        let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![bs, cout, oh, ow]);
        for s in 0..bs {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((s * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * cin + ci) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((s * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.gen_range(-1.0..1.0));
            let w = Tensor::from_fn(vec![4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let b = Tensor::from_fn(vec![4], |_| rng.gen_range(-1.0..1.0));
            let expect = conv_oracle(&x, &w, &b, stride, padding);
            let mut g = Graph::<f64>::new();
            let xi = g.constant(x);
            let wi = g.constant(w);
            let bi = g.constant(b);
            let y = g.conv2d(xi, wi, bi, stride, padding).unwrap();
            assert_eq!(g.value(y).shape(), expect.shape());
            assert!(
                g.value(y).max_abs_diff(&expect) < 1e-10,
                "stride {stride} pad {padding}"
            );
        }
    }

    #[test]
    fn conv2d_channel_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![3, 4, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 4, 3, 3]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 4.0]));
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());

        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = g.matmul(m, v).unwrap();
        assert_eq!(g.value(y).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_batched_matches_per_slice_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let a = Tensor::from_fn(vec![3, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![3, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let ai = g.constant(a.clone());
        let bi = g.constant(b.clone());
        let y = g.matmul(ai, bi).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2, 2]);
        for s in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += a.data()[s * 8 + i * 4 + p] * b.data()[s * 8 + p * 2 + j];
                    }
                    let got = g.value(y).data()[s * 4 + i * 2 + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_rows_uniform_single_and_oracle() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x1 = g.constant(t(&[1], &[123.0]));
        let y1 = g.softmax_rows(x1).unwrap();
        assert!((g.value(y1).data()[0] - 1.0).abs() < 1e-12);

        // exp-normalize oracle
        let x2 = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y2 = g.softmax_rows(x2).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in g.value(y2).data().iter().enumerate() {
            let expect = ((i + 1) as f64).exp() / denom;
            assert!((v - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_relu_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0, -1.0, 2.0, 500.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!(g.value(s).data()[3] <= 1.0 && g.value(s).data()[3] > 0.999);
        assert!(g.value(s).all_finite());
        let xneg = g.constant(t(&[1], &[-500.0]));
        let sneg = g.sigmoid(xneg).unwrap();
        assert!(g.value(sneg).data()[0] >= 0.0 && g.value(sneg).data()[0] < 1e-6);
        assert!(g.value(sneg).all_finite());
        let r = g.relu(x).unwrap();
        assert_eq!(&g.value(r).data()[..3], &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_constant_arithmetic_and_linearity() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![2, 3, 4, 4], 2.5));
        let y = g.gap(c).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        for &v in g.value(y).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.gap(x).unwrap();
        assert!((g.value(y).data()[0] - 2.5).abs() < 1e-12);

        let neg = g.affine(x, -1.0, 0.0).unwrap();
        let yneg = g.gap(neg).unwrap();
        assert!((g.value(y).data()[0] + g.value(yneg).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.concat(&[x], 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert_eq!(g.value(y).shape(), g.value(x).shape());
    }

    #[test]
    fn concat_axis1_layout() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn mean_axis_size_one_squeezes_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn channel_mul_ones_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = g.constant(Tensor::ones(vec![1, 2]));
        let y = g.channel_mul(x, w).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn linear_identity_zero_and_composition_oracle() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = g.constant(Tensor::zeros(vec![2]));
        let y = g.linear(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zero_w = g.constant(Tensor::zeros(vec![2, 3]));
        let bias = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y2 = g.linear(x, zero_w, bias).unwrap();
        assert_eq!(g.value(y2).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);

        // linear == matmul + bias broadcast
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let xv = Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-1.0..1.0));
        let wv = Tensor::from_fn(vec![4, 2], |_| rng.gen_range(-1.0..1.0));
        let bv = Tensor::from_fn(vec![2], |_| rng.gen_range(-1.0..1.0));
        let xi = g.constant(xv.clone());
        let wi = g.constant(wv.clone());
        let bi = g.constant(bv.clone());
        let y3 = g.linear(xi, wi, bi).unwrap();
        let mm = g.matmul(xi, wi).unwrap();
        for r in 0..3 {
            for cidx in 0..2 {
                let expect = g.value(mm).data()[r * 2 + cidx] + bv.data()[cidx];
                assert!((g.value(y3).data()[r * 2 + cidx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_roundtrip_and_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.permute(y, &[1, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::Contract { .. }));
    }

    #[test]
    fn backward_visits_shared_leaf_twice() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn identical_graphs_are_bitwise_deterministic() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::from_fn(vec![2, 3, 6, 6], |_| rng.gen_range(-1.0f32..1.0)), true);
            let w = g.leaf(Tensor::from_fn(vec![4, 3, 3, 3], |_| rng.gen_range(-1.0f32..1.0)), true);
            let b = g.leaf(Tensor::from_fn(vec![4], |_| rng.gen_range(-1.0f32..1.0)), true);
            let c = g.conv2d(x, w, b, 2, 1).unwrap();
            let r = g.relu(c).unwrap();
            let p = g.gap(r).unwrap();
            let s = g.sum_all(p).unwrap();
            g.backward(s).unwrap();
            (
                g.value(s).data().to_vec(),
                g.grad(x).unwrap().data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
    }
}
