//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a parameter leaf. Reductions accumulate in `f64`
//! regardless of the working precision.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_winograd(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    Gather(NodeId, Rc<[usize]>),
    Concat(Vec<NodeId>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Prelu {
        x: NodeId,
        slope: NodeId,
    },
    Gelu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-row (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    GlobalAvgPool(NodeId),
    ScaleChannels {
        x: NodeId,
        v: NodeId,
    },
    ScaleSpatial {
        x: NodeId,
        m: NodeId,
    },
    Charbonnier {
        pred: NodeId,
        target: NodeId,
        eps: f64,
    },
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Free the values of nodes `from..` that no gradient flows through,
    /// except `keep`. For inference, where a finished block's internals are
    /// never read again. Released nodes keep their shape but hold no data.
    pub fn release(&mut self, from: usize, keep: NodeId) {
        for (i, node) in self.nodes.iter_mut().enumerate().skip(from) {
            if i != keep.0 && !node.needs_grad {
                node.value.free();
            }
        }
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{}: shape mismatch {:?} vs {:?}",
            what,
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let mut v = self.value(a).clone();
        for (o, &r) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= r;
        }
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let mut v = self.value(a).clone();
        for (o, &r) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= r;
        }
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Every shape permutation
    /// (window partition, cyclic shift, pixel shuffle, transposes) goes
    /// through here.
    pub fn gather(&mut self, x: NodeId, index: Rc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        ensure!(
            n == index.len(),
            "gather: index length {} does not match shape {:?}",
            index.len(),
            shape
        );
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().max().filter(|&&m| m >= src.len()) {
            return Err(crate::error::Error::invalid(format!(
                "gather: index {} out of bounds {}",
                bad,
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_vec(shape, data)?;
        Ok(self.push(v, Op::Gather(x, index), &[x]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        ensure!(!parts.is_empty(), "concat: no inputs");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s[1..] == tail[..],
                "concat: trailing shape {:?} vs {:?}",
                &s[1..],
                tail
            );
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// 2-D convolution of a `[C_in, H, W]` map with `[C_out, C_in, kh, kw]`
    /// weights, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        ensure!(xs.len() == 3, "conv2d: input must be [C,H,W], got {:?}", xs);
        ensure!(ws.len() == 4, "conv2d: weight must be 4-D, got {:?}", ws);
        ensure!(
            ws[1] == xs[0],
            "conv2d: weight expects {} input channels, input has {}",
            ws[1],
            xs[0]
        );
        ensure!(stride >= 1, "conv2d: stride must be positive");
        let (h, wd) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        ensure!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            wd + 2 * pad
        );
        let geom = ConvGeom {
            c_in: xs[0],
            h,
            w: wd,
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [geom.c_out],
                "conv2d: bias shape {:?}, expected [{}]",
                self.shape(b),
                geom.c_out
            );
        }
        let grad = [x, w].iter().chain(b.iter()).any(|&i| self.needs(i));
        let hw = geom.ho * geom.wo;
        let mut out = vec![T::zero(); geom.c_out * hw];
        let wmat = MatRef::new(self.value(w).data(), geom.c_out, geom.k());
        if geom.is_pointwise() {
            gemm(wmat, MatRef::new(self.value(x).data(), geom.k(), hw), T::zero(), &mut out);
        } else if geom.is_winograd() && !grad {
            winograd_conv(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        } else if geom.stride == 1 {
            shifted_conv(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        } else {
            let cols = im2col(self.value(x).data(), &geom);
            gemm(wmat, MatRef::new(&cols, geom.k(), hw), T::zero(), &mut out);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (row, &bv) in out.chunks_mut(hw).zip(bias) {
                for o in row {
                    *o += bv;
                }
            }
        }
        let v = Tensor::from_vec(&[geom.c_out, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Parametric ReLU with a single shared slope (`slope` has shape `[1]`).
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        ensure!(
            self.value(slope).len() == 1,
            "prelu: slope must hold one value, got {:?}",
            self.shape(slope)
        );
        let a = self.value(slope).data()[0];
        let v = self
            .value(x)
            .map(|e| if e > T::zero() { e } else { a * e });
        Ok(self.push(v, Op::Prelu { x, slope }, &[x, slope]))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| T::c(gelu(e.f64())));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// `y = x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        ensure!(ws.len() == 2, "linear: weight must be [out, in], got {:?}", ws);
        let (n_out, n_in) = (ws[0], ws[1]);
        ensure!(
            xs.last() == Some(&n_in),
            "linear: input last dim {:?} does not match weight in-dim {}",
            xs.last(),
            n_in
        );
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [n_out],
                "linear: bias shape {:?}, expected [{}]",
                self.shape(b),
                n_out
            );
        }
        let rows = self.value(x).len() / n_in;
        let mut out = vec![T::zero(); rows * n_out];
        gemm(
            MatRef::new(self.value(x).data(), rows, n_in),
            MatRef::new(self.value(w).data(), n_out, n_in).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let v = Tensor::from_vec(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched `[B, M, K] x [B, K, N]`; with `trans_b`, `b` is `[B, N, K]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        ensure!(
            as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0],
            "batch_matmul: incompatible shapes {:?} and {:?}",
            as_,
            bs
        );
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        ensure!(
            k == kb,
            "batch_matmul: inner dims {} vs {} (shapes {:?}, {:?})",
            k,
            kb,
            as_,
            bs
        );
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let am = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bm = if trans_b {
                MatRef::new(&bd[i * n * k..(i + 1) * n * k], n, k).t()
            } else {
                MatRef::new(&bd[i * k * n..(i + 1) * k * n], k, n)
            };
            gemm(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let v = Tensor::from_vec(&[batch, m, n], out)?;
        Ok(self.push(v, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm: affine params must be [{}], got {:?} / {:?}",
            d,
            self.shape(gamma),
            self.shape(beta)
        );
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).clone();
        let mut stats = Vec::with_capacity(out.len() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                let xhat = (v.f64() - mean) * rstd;
                *v = T::c(xhat) * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over all axes but the first: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let plane = xv.len() / c;
        let data = xv
            .data()
            .chunks(plane)
            .map(|p| T::c(p.iter().map(|v| v.f64()).sum::<f64>() / plane as f64))
            .collect();
        let v = Tensor::from_vec(&[c], data).expect("pool shape");
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// `y[c, ...] = x[c, ...] * v[c]`.
    pub fn scale_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let c = self.shape(x)[0];
        ensure!(
            self.value(v).len() == c,
            "scale_channels: {} weights for {} channels",
            self.value(v).len(),
            c
        );
        let plane = self.value(x).len() / c;
        let w = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (p, &wc) in out.data_mut().chunks_mut(plane).zip(&w) {
            for e in p {
                *e *= wc;
            }
        }
        Ok(self.push(out, Op::ScaleChannels { x, v }, &[x, v]))
    }

    /// `y[c, p] = x[c, p] * m[p]` for a per-position map `m`.
    pub fn scale_spatial(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let c = self.shape(x)[0];
        let plane = self.value(x).len() / c;
        ensure!(
            self.value(m).len() == plane,
            "scale_spatial: map has {} positions, feature plane has {}",
            self.value(m).len(),
            plane
        );
        let mv = self.value(m).data().to_vec();
        let mut out = self.value(x).clone();
        for p in out.data_mut().chunks_mut(plane) {
            for (e, &w) in p.iter_mut().zip(&mv) {
                *e *= w;
            }
        }
        Ok(self.push(out, Op::ScaleSpatial { x, m }, &[x, m]))
    }

    /// Mean of `sqrt((pred - target)^2 + eps^2)`, shape `[1]`.
    pub fn charbonnier(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        self.binary_same_shape(pred, target, "charbonnier")?;
        ensure!(eps > 0.0, "charbonnier: eps must be positive, got {}", eps);
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len().max(1);
        let s: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = a.f64() - b.f64();
                (d * d + eps * eps).sqrt()
            })
            .sum();
        let v = Tensor::scalar(T::c(s / n as f64));
        Ok(self.push(v, Op::Charbonnier { pred, target, eps }, &[pred, target]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(T::c(self.value(x).sum_f64()));
        self.push(v, Op::Sum(x), &[x])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: NodeId) -> Result<Grads<T>> {
        ensure!(
            self.value(root).len() == 1,
            "backward: root must be scalar, got {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if self.needs(i) {
                        accumulate(grads, i, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, elementwise(g, self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, elementwise(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|e| e * s));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, g.clone().reshaped(&shape).expect("reshape grad"));
            }
            Op::Gather(x, index) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &gv) in index.iter().zip(gd) {
                    d[i] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let t = Tensor::from_vec(self.shape(p), gd[off..off + n].to_vec())
                            .expect("concat grad");
                        accumulate(grads, p, t);
                    }
                    off += n;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let hw = geom.ho * geom.wo;
                let k = geom.k();
                let xd = self.value(*x).data();
                if geom.stride == 1 && !geom.is_pointwise() {
                    let wd = self.value(*w).data();
                    let (need_w, need_x) = (self.needs(*w), self.needs(*x));
                    let (dw, dx) = shifted_conv_backward(xd, wd, gd, geom, need_w, need_x);
                    if let Some(dw) = dw {
                        accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).unwrap());
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            accumulate(grads, *b, bias_grad(gd, geom.c_out, hw));
                        }
                    }
                    if let Some(dx) = dx {
                        let shape = [geom.c_in, geom.h, geom.w];
                        accumulate(grads, *x, Tensor::from_vec(&shape, dx).unwrap());
                    }
                    return;
                }
                let owned_cols;
                let cols: &[T] = if geom.is_pointwise() {
                    xd
                } else {
                    owned_cols = im2col(xd, geom);
                    &owned_cols
                };
                let dy = MatRef::new(gd, geom.c_out, hw);
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    gemm(dy, MatRef::new(cols, k, hw).t(), T::zero(), dw.data_mut());
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, bias_grad(gd, geom.c_out, hw));
                    }
                }
                if self.needs(*x) {
                    let wm = MatRef::new(self.value(*w).data(), geom.c_out, k);
                    let mut dcols = vec![T::zero(); k * hw];
                    gemm(wm.t(), dy, T::zero(), &mut dcols);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        col2im(&dcols, geom)
                    };
                    accumulate(
                        grads,
                        *x,
                        Tensor::from_vec(&[geom.c_in, geom.h, geom.w], dx).unwrap(),
                    );
                }
            }
            Op::Prelu { x, slope } => {
                let a = self.value(*slope).data()[0];
                let xv = self.value(*x);
                if self.needs(*x) {
                    accumulate(
                        grads,
                        *x,
                        elementwise(g, xv, |gv, xe| if xe > T::zero() { gv } else { a * gv }),
                    );
                }
                if self.needs(*slope) {
                    let da: f64 = gd
                        .iter()
                        .zip(xv.data())
                        .filter(|(_, &xe)| xe <= T::zero())
                        .map(|(&gv, &xe)| gv.f64() * xe.f64())
                        .sum();
                    accumulate(grads, *slope, Tensor::from_vec(&[1], vec![T::c(da)]).unwrap());
                }
            }
            Op::Gelu(x) => {
                accumulate(
                    grads,
                    *x,
                    elementwise(g, self.value(*x), |gv, xe| gv * T::c(gelu_grad(xe.f64()))),
                );
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / n_in;
                let dy = MatRef::new(gd, rows, n_out);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    gemm(
                        dy,
                        MatRef::new(self.value(*w).data(), n_out, n_in),
                        T::zero(),
                        dx.data_mut(),
                    );
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(ws);
                    gemm(
                        dy.t(),
                        MatRef::new(self.value(*x).data(), rows, n_in),
                        T::zero(),
                        dw.data_mut(),
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0f64; n_out];
                        for row in gd.chunks(n_out) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v.f64();
                            }
                        }
                        let db = db.into_iter().map(T::c).collect();
                        accumulate(grads, *b, Tensor::from_vec(&[n_out], db).unwrap());
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = g.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(as_);
                    for i in 0..batch {
                        let dc = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bm = if *trans_b {
                            MatRef::new(&bd[i * n * k..(i + 1) * n * k], n, k)
                        } else {
                            MatRef::new(&bd[i * k * n..(i + 1) * k * n], k, n).t()
                        };
                        gemm(dc, bm, T::zero(), &mut da.data_mut()[i * m * k..(i + 1) * m * k]);
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    for i in 0..batch {
                        let dc = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k);
                        let out = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(dc.t(), am, T::zero(), out);
                        } else {
                            gemm(am.t(), dc, T::zero(), out);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gd.chunks(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    for j in 0..d {
                        dxr[j] = T::c(yr[j].f64() * (gr[j].f64() - dot));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut dx = Tensor::zeros(xv.shape());
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for (((xr, gr), dxr), &(mean, rstd)) in xv
                    .data()
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .zip(stats)
                {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (xr[j].f64() - mean) * rstd;
                        let gv = gr[j].f64();
                        dgamma[j] += gv * xhat[j];
                        dbeta[j] += gv;
                        dxhat[j] = gv * gam[j].f64();
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dxr[j] = T::c(rstd * (dxhat[j] - m1 - xhat[j] * m2));
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let t = dgamma.into_iter().map(T::c).collect();
                    accumulate(grads, *gamma, Tensor::from_vec(&[d], t).unwrap());
                }
                if self.needs(*beta) {
                    let t = dbeta.into_iter().map(T::c).collect();
                    accumulate(grads, *beta, Tensor::from_vec(&[d], t).unwrap());
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let c = xs[0];
                let plane = self.value(*x).len() / c;
                let inv = T::c(1.0 / plane as f64);
                let mut dx = Tensor::zeros(xs);
                for (p, &gv) in dx.data_mut().chunks_mut(plane).zip(gd) {
                    p.fill(gv * inv);
                }
                accumulate(grads, *x, dx);
            }
            Op::ScaleChannels { x, v } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let plane = xv.len() / c;
                let w = self.value(*v).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (p, &wc) in dx.data_mut().chunks_mut(plane).zip(w) {
                        for e in p {
                            *e *= wc;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*v) {
                    let dv: Vec<T> = gd
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gp, xp)| {
                            T::c(gp.iter().zip(xp).map(|(a, b)| a.f64() * b.f64()).sum::<f64>())
                        })
                        .collect();
                    accumulate(grads, *v, Tensor::from_vec(self.shape(*v), dv).unwrap());
                }
            }
            Op::ScaleSpatial { x, m } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let plane = xv.len() / c;
                let mv = self.value(*m).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for p in dx.data_mut().chunks_mut(plane) {
                        for (e, &w) in p.iter_mut().zip(mv) {
                            *e *= w;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*m) {
                    let mut dm = vec![0.0f64; plane];
                    for (gp, xp) in gd.chunks(plane).zip(xv.data().chunks(plane)) {
                        for ((acc, a), b) in dm.iter_mut().zip(gp).zip(xp) {
                            *acc += a.f64() * b.f64();
                        }
                    }
                    let dm = dm.into_iter().map(T::c).collect();
                    accumulate(grads, *m, Tensor::from_vec(self.shape(*m), dm).unwrap());
                }
            }
            Op::Charbonnier { pred, target, eps } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = gd[0].f64() / p.len().max(1) as f64;
                let dp: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| {
                        let d = a.f64() - b.f64();
                        T::c(scale * d / (d * d + eps * eps).sqrt())
                    })
                    .collect();
                let dp = Tensor::from_vec(p.shape(), dp).unwrap();
                if self.needs(*target) {
                    accumulate(grads, *target, dp.map(|e| -e));
                }
                if self.needs(*pred) {
                    accumulate(grads, *pred, dp);
                }
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
        }
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let mut total = 0.0;
    let mut exps = Vec::with_capacity(row.len());
    for v in row.iter() {
        let e = (v.f64() - max).exp();
        total += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = T::c(e / total);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.k() * hw];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn bias_grad<T: Real>(gd: &[T], c_out: usize, hw: usize) -> Tensor<T> {
    let db = gd
        .chunks(hw)
        .map(|r| T::c(r.iter().map(|v| v.f64()).sum::<f64>()))
        .collect();
    Tensor::from_vec(&[c_out], db).unwrap()
}

// Stride-1 convolutions run as one product per kernel tap over a zero-padded
// copy of the input. Outputs are computed on the padded row pitch `wp`, so a
// tap is a constant offset into the padded buffer and no patch matrix is
// materialised. The `wp - wo` surplus columns per row are discarded.

fn padded_planes<T: Real>(x: &[T], g: &ConvGeom) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    // Slack so the last tap's window stays in bounds.
    let mut xp = vec![T::zero(); g.c_in * hp * wp + g.kw];
    for c in 0..g.c_in {
        for y in 0..g.h {
            let dst = (c * hp + y + g.pad) * wp + g.pad;
            xp[dst..dst + g.w].copy_from_slice(&x[(c * g.h + y) * g.w..][..g.w]);
        }
    }
    (xp, hp, wp)
}

fn shifted_conv<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (xp, hp, wp) = padded_planes(x, g);
    let n = g.ho * wp;
    let taps = g.kh * g.kw;
    let mut acc = vec![T::zero(); g.c_out * n];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let tap = ky * g.kw + kx;
            let beta = if tap == 0 { T::zero() } else { T::one() };
            // SAFETY: A is the [c_out, c_in] tap slice of w; B spans at most
            // c_in*hp*wp + kw - 1 elements of xp; acc is [c_out, n].
            unsafe {
                T::gemm_raw(
                    g.c_out,
                    g.c_in,
                    n,
                    T::one(),
                    w.as_ptr().add(tap),
                    (g.c_in * taps) as isize,
                    taps as isize,
                    xp.as_ptr().add(ky * wp + kx),
                    (hp * wp) as isize,
                    1,
                    beta,
                    acc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    for (row, src) in out.chunks_mut(g.wo).zip(acc.chunks(wp)) {
        row.copy_from_slice(&src[..g.wo]);
    }
}

// 3x3 "same" convolutions without a gradient use Winograd F(2x2, 3x3):
// each 2x2 output block costs 16 multiplies per channel pair instead of 36.
// The rounding differs from the direct sum by a few ulps, so graphs that
// are differentiated keep the direct path.
const WINOGRAD_BAND_TILES: usize = 256;

fn winograd_conv<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (ci, co, h, wd) = (g.c_in, g.c_out, g.h, g.w);
    let (th, tw) = (h.div_ceil(2), wd.div_ceil(2));
    let half = T::c(0.5);

    let mut u = vec![T::zero(); 16 * co * ci];
    for o in 0..co {
        for i in 0..ci {
            let k = &w[(o * ci + i) * 9..][..9];
            let mut gg = [[T::zero(); 3]; 4];
            for c in 0..3 {
                let (a, b, d) = (k[c], k[3 + c], k[6 + c]);
                gg[0][c] = a;
                gg[1][c] = (a + b + d) * half;
                gg[2][c] = (a - b + d) * half;
                gg[3][c] = d;
            }
            for (r, row) in gg.iter().enumerate() {
                let e = [
                    row[0],
                    (row[0] + row[1] + row[2]) * half,
                    (row[0] - row[1] + row[2]) * half,
                    row[2],
                ];
                for (c, &v) in e.iter().enumerate() {
                    u[((r * 4 + c) * co + o) * ci + i] = v;
                }
            }
        }
    }

    // Zero-padded planes sized to whole 4x4 input windows.
    let (hp, wp) = (2 * th + 2, 2 * tw + 2);
    let mut xp = vec![T::zero(); ci * hp * wp];
    for c in 0..ci {
        for y in 0..h {
            xp[(c * hp + y + 1) * wp + 1..][..wd].copy_from_slice(&x[(c * h + y) * wd..][..wd]);
        }
    }

    // Work on bands of tile rows small enough that the transformed input
    // and the products stay in cache. Both transforms run along a row of
    // tiles so every stream they touch is contiguous.
    let band = (WINOGRAD_BAND_TILES / tw).clamp(1, th);
    let mut v = vec![T::zero(); 16 * ci * band * tw];
    let mut m = vec![T::zero(); 16 * co * band * tw];
    let mut t = vec![T::zero(); 4 * wp];
    let mut r = vec![T::zero(); 8 * tw];
    let mut rows = vec![T::zero(); 4 * tw];
    for ty0 in (0..th).step_by(band) {
        let nb = band.min(th - ty0) * tw;
        for c in 0..ci {
            for ty in ty0..ty0 + nb / tw {
                let src = &xp[(c * hp + 2 * ty) * wp..][..4 * wp];
                let (d0, rest) = src.split_at(wp);
                let (d1, rest) = rest.split_at(wp);
                let (d2, d3) = rest.split_at(wp);
                let (t0, rest) = t.split_at_mut(wp);
                let (t1, rest) = rest.split_at_mut(wp);
                let (t2, t3) = rest.split_at_mut(wp);
                for q in 0..wp {
                    t0[q] = d0[q] - d2[q];
                    t1[q] = d1[q] + d2[q];
                    t2[q] = d2[q] - d1[q];
                    t3[q] = d1[q] - d3[q];
                }
                let off = (ty - ty0) * tw;
                for (rr, row) in t.chunks(wp).enumerate() {
                    let base = (rr * 4 * ci + c) * nb + off;
                    let stride = ci * nb;
                    let (v0, rest) = v[base..].split_at_mut(stride);
                    let (v1, rest) = rest.split_at_mut(stride);
                    let (v2, v3) = rest.split_at_mut(stride);
                    for tx in 0..tw {
                        let e = &row[2 * tx..2 * tx + 4];
                        v0[tx] = e[0] - e[2];
                        v1[tx] = e[1] + e[2];
                        v2[tx] = e[2] - e[1];
                        v3[tx] = e[1] - e[3];
                    }
                }
            }
        }

        for xi in 0..16 {
            gemm(
                MatRef::new(&u[xi * co * ci..][..co * ci], co, ci),
                MatRef::new(&v[xi * ci * nb..][..ci * nb], ci, nb),
                T::zero(),
                &mut m[xi * co * nb..][..co * nb],
            );
        }

        for o in 0..co {
            let dst = &mut out[o * h * wd..][..h * wd];
            for ty in ty0..ty0 + nb / tw {
                let off = (ty - ty0) * tw;
                let mk = |k: usize| &m[(k * co + o) * nb + off..][..tw];
                let (r0, r1) = r.split_at_mut(4 * tw);
                for q in 0..4 {
                    let (a, b, c, d) = (mk(q), mk(4 + q), mk(8 + q), mk(12 + q));
                    let (r0, r1) = (&mut r0[q * tw..][..tw], &mut r1[q * tw..][..tw]);
                    for tx in 0..tw {
                        r0[tx] = a[tx] + b[tx] + c[tx];
                        r1[tx] = b[tx] - c[tx] - d[tx];
                    }
                }
                for (half, out_row) in r.chunks(4 * tw).zip(rows.chunks_mut(2 * tw)) {
                    let (c0, rest) = half.split_at(tw);
                    let (c1, rest) = rest.split_at(tw);
                    let (c2, c3) = rest.split_at(tw);
                    for tx in 0..tw {
                        out_row[2 * tx] = c0[tx] + c1[tx] + c2[tx];
                        out_row[2 * tx + 1] = c1[tx] - c2[tx] - c3[tx];
                    }
                }
                for (dy, out_row) in rows.chunks(2 * tw).enumerate() {
                    let y = 2 * ty + dy;
                    if y < h {
                        dst[y * wd..][..wd].copy_from_slice(&out_row[..wd]);
                    }
                }
            }
        }
    }
}

fn shifted_conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gd: &[T],
    g: &ConvGeom,
    need_w: bool,
    need_x: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (xp, hp, wp) = padded_planes(x, g);
    let n = g.ho * wp;
    let taps = g.kh * g.kw;
    // Upstream gradient on the padded pitch; surplus columns stay zero.
    let mut dyp = vec![T::zero(); g.c_out * n];
    for (dst, src) in dyp.chunks_mut(wp).zip(gd.chunks(g.wo)) {
        dst[..g.wo].copy_from_slice(src);
    }
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut dxp = need_x.then(|| vec![T::zero(); xp.len()]);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let tap = ky * g.kw + kx;
            let off = ky * wp + kx;
            // SAFETY: same extents as the forward pass; each call writes
            // disjoint elements of its destination.
            unsafe {
                if let Some(dw) = dw.as_mut() {
                    T::gemm_raw(
                        g.c_out,
                        n,
                        g.c_in,
                        T::one(),
                        dyp.as_ptr(),
                        n as isize,
                        1,
                        xp.as_ptr().add(off),
                        1,
                        (hp * wp) as isize,
                        T::zero(),
                        dw.as_mut_ptr().add(tap),
                        (g.c_in * taps) as isize,
                        taps as isize,
                    );
                }
                if let Some(dxp) = dxp.as_mut() {
                    T::gemm_raw(
                        g.c_in,
                        g.c_out,
                        n,
                        T::one(),
                        w.as_ptr().add(tap),
                        taps as isize,
                        (g.c_in * taps) as isize,
                        dyp.as_ptr(),
                        n as isize,
                        1,
                        T::one(),
                        dxp.as_mut_ptr().add(off),
                        (hp * wp) as isize,
                        1,
                    );
                }
            }
        }
    }
    let dx = dxp.map(|dxp| {
        let mut dx = Vec::with_capacity(g.c_in * g.h * g.w);
        for c in 0..g.c_in {
            for y in 0..g.h {
                let s = (c * hp + y + g.pad) * wp + g.pad;
                dx.extend_from_slice(&dxp[s..s + g.w]);
            }
        }
        dx
    });
    (dw, dx)
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in s.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}
