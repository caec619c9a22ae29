//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during one forward pass. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse.

use std::collections::BTreeMap;

use super::conv::{col2im, gemm, im2col, out_extent, ConvGeom};
use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Batch normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Affine {
        x: NodeId,
        scale: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Exp(_) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Concat { .. } => "concat_channels",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor) {
        self.0.insert(name, t);
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Toggles the per-op NaN/Inf scan (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MaxPool2 { x, .. } | Op::Upsample2 { x } => vec![x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Ln(x) | Op::Exp(x) | Op::Sum(x) | Op::Mean(x) => {
                vec![x]
            }
            Op::Clamp { x, .. } | Op::Affine { x, .. } => vec![x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Concat { a, b } => vec![a, b],
        }
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Param(name.to_string()),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Cross-correlation of `x: (N, C, H, W)` with `w: (O, C, K, K)` plus an
    /// optional per-output-channel bias `b: (O)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, wc, kh, kw) = self.value(w).dims4("conv2d")?;
        if wc != c || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs kernel {:?}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} output channels", self.value(b).shape()),
                ));
            }
        }
        let (ho, wo) = match (out_extent(h, kh, stride, pad), out_extent(wd, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("{h}x{wd} input does not tile with k={kh} stride={stride} pad={pad}"),
                ))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let plane = c * h * wd;
        let out_plane = o * ho * wo;
        let mut out = vec![0.0; n * out_plane];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geom.rows() * geom.cols()]
        };
        for i in 0..n {
            let xi = &xv[i * plane..(i + 1) * plane];
            let colm: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[i * out_plane..(i + 1) * out_plane];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_exact_mut(ho * wo).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            gemm(
                o,
                geom.rows(),
                geom.cols(),
                wv,
                false,
                colm,
                false,
                if b.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in
    /// raster order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("upsample2")?;
        let xv = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[plane * ho * wo + y * wo + xx] = xv[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::Upsample2 { x })
    }

    /// Per-channel normalization over batch and spatial axes.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for (o, &v) in out[r.clone()].iter_mut().zip(&xv[r]) {
                    *o = g * (v - mu) * is + b;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Batch mean and (biased) variance used by a train-mode batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        same_shape(name, self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Joins `(N, Ca, H, W)` and `(N, Cb, H, W)` into `(N, Ca + Cb, H, W)`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push(value, Op::Concat { a, b })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, to: NodeId, g: Tensor| {
                if !self.nodes[to.0].requires_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            let wants = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match out.0.get_mut(name) {
                    Some(acc) => acc.add_assign(&dy),
                    None => out.insert(name.clone(), dy),
                },
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, geom, &dy, wants(*x));
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *w, dw);
                    if let Some(b) = b {
                        send(&mut grads, *b, db);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (g, &i) in dy.data().iter().zip(argmax) {
                        dx.data_mut()[i] += g;
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = Tensor::zeros(&xs);
                    let planes = xs[0] * xs[1];
                    let dd = dy.data();
                    let dxm = dx.data_mut();
                    for p in 0..planes {
                        for y in 0..ho {
                            for xx in 0..wo {
                                dxm[p * h * w + (y / 2) * w + xx / 2] += dd[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                    ..
                } => {
                    let (dx, dg, db) =
                        self.batch_norm_backward(*x, *gamma, mean, inv_std, *batch_stats, &dy);
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dg);
                    send(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let g = self.value(*x).zip_map(&dy, |v, d| if v > 0.0 { d } else { 0.0 });
                    send(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let g = node.value.zip_map(&dy, |y, d| d * y * (1.0 - y));
                    send(&mut grads, *x, g);
                }
                Op::Ln(x) => {
                    let g = self.value(*x).zip_map(&dy, |v, d| d / v);
                    send(&mut grads, *x, g);
                }
                Op::Exp(x) => {
                    let g = node.value.zip_map(&dy, |y, d| d * y);
                    send(&mut grads, *x, g);
                }
                Op::Clamp { x, lo, hi } => {
                    let g = self
                        .value(*x)
                        .zip_map(&dy, |v, d| if v >= *lo && v <= *hi { d } else { 0.0 });
                    send(&mut grads, *x, g);
                }
                Op::Affine { x, scale, .. } => {
                    send(&mut grads, *x, dy.map(|d| d * scale));
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, dy.clone());
                    send(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, dy.map(|d| -d));
                    send(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if wants(*a) {
                        send(&mut grads, *a, dy.zip_map(bv, |d, v| d * v));
                    }
                    if wants(*b) {
                        send(&mut grads, *b, dy.zip_map(av, |d, v| d * v));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if wants(*a) {
                        send(&mut grads, *a, dy.zip_map(bv, |d, v| d / v));
                    }
                    if wants(*b) {
                        let g = Tensor::new(
                            bv.shape().to_vec(),
                            dy.data()
                                .iter()
                                .zip(av.data())
                                .zip(bv.data())
                                .map(|((d, a), b)| -d * a / (b * b))
                                .collect(),
                        )?;
                        send(&mut grads, *b, g);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4("concat_channels")?;
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    let (mut da, mut dbv) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                    for i in 0..n {
                        let base = i * (ca + cb) * hw;
                        da.extend_from_slice(&dy.data()[base..base + ca * hw]);
                        dbv.extend_from_slice(&dy.data()[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    send(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da)?);
                    send(&mut grads, *b, Tensor::new(vec![n, cb, h, w], dbv)?);
                }
                Op::Sum(x) => {
                    let g = dy.data()[0];
                    send(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let g = dy.data()[0] / xv.len() as f64;
                    send(&mut grads, *x, Tensor::full(xv.shape(), g));
                }
            }
        }
        Ok(out)
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        geom: &ConvGeom,
        dy: &Tensor,
        want_dx: bool,
    ) -> (Option<Tensor>, Tensor, Tensor) {
        let xt = self.value(x);
        let wt = self.value(w);
        let n = xt.shape()[0];
        let o = wt.shape()[0];
        let (rows, ncols) = (geom.rows(), geom.cols());
        let plane = geom.c * geom.h * geom.w;
        let out_plane = o * ncols;
        let mut dw = Tensor::zeros(wt.shape());
        let mut db = vec![0.0; o];
        let mut dx = want_dx.then(|| Tensor::zeros(xt.shape()));
        let mut cols = vec![0.0; rows * ncols];
        let mut dcols = vec![0.0; rows * ncols];
        for i in 0..n {
            let xi = &xt.data()[i * plane..(i + 1) * plane];
            let dyi = &dy.data()[i * out_plane..(i + 1) * out_plane];
            for (oc, chunk) in dyi.chunks_exact(ncols).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
            let colm: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, geom, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(o, ncols, rows, dyi, false, colm, true, 1.0, dw.data_mut());
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx.data_mut()[i * plane..(i + 1) * plane];
                if geom.is_pointwise() {
                    gemm(rows, o, ncols, wt.data(), true, dyi, false, 1.0, dxi);
                } else {
                    gemm(rows, o, ncols, wt.data(), true, dyi, false, 0.0, &mut dcols);
                    col2im(&dcols, geom, dxi);
                }
            }
        }
        (dx, dw, Tensor::new(vec![o], db).expect("bias length"))
    }

    fn batch_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("batchnorm").expect("checked in forward");
        let hw = h * w;
        let m = (n * hw) as f64;
        let gv = self.value(gamma).data();
        let (xv, dyv) = (xt.data(), dy.data());
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&v, &d) in xv[r.clone()].iter().zip(&dyv[r]) {
                    dg[ch] += d * (v - mean[ch]) * inv_std[ch];
                    db[ch] += d;
                }
            }
        }
        let mut dx = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (mu, is, g) = (mean[ch], inv_std[ch], gv[ch]);
                for ((o, &v), &d) in dx[r.clone()].iter_mut().zip(&xv[r.clone()]).zip(&dyv[r]) {
                    *o = if batch_stats {
                        let xhat = (v - mu) * is;
                        g * is / m * (m * d - db[ch] - xhat * dg[ch])
                    } else {
                        d * g * is
                    };
                }
            }
        }
        (
            Tensor::new(xt.shape().to_vec(), dx).expect("same shape"),
            Tensor::new(vec![c], dg).expect("channel count"),
            Tensor::new(vec![c], db).expect("channel count"),
        )
    }
}
