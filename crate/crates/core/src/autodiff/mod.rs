//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op applied during a forward pass; [`Var`] is a
//! handle into it. The tape is rebuilt for every forward pass.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{check_gradients, GradReport};

use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BBox, BoxCoder};
use crate::tensor::Tensor;
use kernels::{conv2d_backward, conv2d_forward, gemm, ConvGeom, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear tap: flat spatial index into a `[H, W]` plane and its weight.
pub type Tap = (usize, f64);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    BilinearSample {
        feature: Var,
        taps: Vec<Vec<Tap>>,
    },
    AvgPool(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    DecodeBoxes {
        offsets: Var,
        jacobian: Vec<[f64; 4]>,
    },
    GiouLoss {
        pred: Var,
        grads: Vec<[f64; 4]>,
        m: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    clamped_boxes: usize,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of predicted boxes widened to the minimum extent by GIoU ops.
    pub fn clamped_boxes(&self) -> usize {
        self.clamped_boxes
    }

    /// Forget gradients so `backward` may run again on this tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geom.cout] {
                    return Err(Error::shape("conv2d bias", bt.shape(), &[geom.cout]));
                }
                Some(bt)
            }
            None => None,
        };
        let out = conv2d_forward(&geom, x, w, b);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `input [N, I] x weight [O, I]^T + bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![0.0; n * o];
        gemm(Mat::new(x.data(), n, i), Mat::new(w.data(), o, i).t(), 0.0, &mut out);
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [o] {
                return Err(Error::shape("linear bias", bt.shape(), &[o]));
            }
            for row in out.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(bt.data()) {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("relu shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("mul_scalar shape");
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum over `targets` of `-log softmax(logits[row])[class]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[0, 0]));
        }
        let (rows, classes) = (t.shape()[0], t.shape()[1]);
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, c) in targets {
            if r >= rows || c >= classes {
                return Err(Error::InvalidArgument(format!(
                    "cross-entropy target ({r}, {c}) outside logits {rows}x{classes}"
                )));
            }
            let row = &t.data()[r * classes..(r + 1) * classes];
            let (p, lse) = softmax(row);
            loss += lse - row[c];
            probs.push(p);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Weighted gathers over the spatial plane of a `[C, H, W]` feature map.
    ///
    /// Output is `[C, taps.len()]`: entry `(c, j) = sum_{(i, w) in taps[j]} w * f[c, i]`.
    pub fn bilinear_sample(&mut self, feature: Var, taps: Vec<Vec<Tap>>, out_shape: Vec<usize>) -> Result<Var> {
        let f = self.value(feature);
        if f.shape().len() != 3 {
            return Err(Error::shape("bilinear_sample", f.shape(), &[0, 0, 0]));
        }
        let (c, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
        if out_shape.iter().product::<usize>() != c * taps.len() {
            return Err(Error::shape("bilinear_sample", &out_shape, &[c, taps.len()]));
        }
        if taps.iter().flatten().any(|&(i, _)| i >= plane) {
            return Err(Error::InvalidArgument("bilinear tap outside feature plane".into()));
        }
        let mut out = Vec::with_capacity(c * taps.len());
        for ch in 0..c {
            let src = &f.data()[ch * plane..(ch + 1) * plane];
            for bin in &taps {
                out.push(bin.iter().map(|&(i, w)| w * src[i]).sum());
            }
        }
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(feature);
        Ok(self.push(out, Op::BilinearSample { feature, taps }, rg))
    }

    /// Mean over the trailing two axes: `[N, C, H, W] -> [N, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(Error::shape("avg_pool", t.shape(), &[0, 0, 0, 0]));
        }
        let (n, c, area) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
        let data = t
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool(x), rg))
    }

    /// `out.flat[i] = input.flat[index[i]]`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Gather { input, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let inner = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).len());
        for &x in xs {
            let t = self.value(x);
            if t.shape() != inner.as_slice() {
                return Err(Error::shape("stack", t.shape(), &inner));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Stack(xs.to_vec()), rg))
    }

    /// Decode `[P, 4]` offsets against `anchors` into corner boxes `[P, 4]`.
    pub fn decode_boxes(&mut self, offsets: Var, anchors: &[BBox], coder: &BoxCoder) -> Result<Var> {
        let t = self.value(offsets);
        if t.shape() != [anchors.len(), 4] {
            return Err(Error::shape("decode_boxes", t.shape(), &[anchors.len(), 4]));
        }
        let mut data = Vec::with_capacity(anchors.len() * 4);
        let mut jacobian = Vec::with_capacity(anchors.len());
        for (row, anchor) in t.data().chunks(4).zip(anchors) {
            let (corners, jac) = coder.decode_with_jacobian(anchor, [row[0], row[1], row[2], row[3]]);
            data.extend_from_slice(&corners);
            jacobian.push(jac);
        }
        let out = Tensor::new(vec![anchors.len(), 4], data)?;
        let rg = self.rg(offsets);
        Ok(self.push(out, Op::DecodeBoxes { offsets, jacobian }, rg))
    }

    /// `sum_i m * (1 - GIoU(pred_i, gt_i))` over rows of `pred [P, 4]`.
    pub fn giou_loss(&mut self, pred: Var, gts: &[BBox], m: f64) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != [gts.len(), 4] {
            return Err(Error::shape("giou_loss", t.shape(), &[gts.len(), 4]));
        }
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(gts.len());
        let mut clamped = 0;
        for (row, gt) in t.data().chunks(4).zip(gts) {
            let r = giou_with_grad([row[0], row[1], row[2], row[3]], gt);
            loss += m * (1.0 - r.giou);
            clamped += usize::from(r.clamped);
            grads.push(r.grad);
        }
        self.clamped_boxes += clamped;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::GiouLoss { pred, grads, m }, rg))
    }

    /// Populate gradients of `loss` w.r.t. every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("called twice without reset_grads"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.fill_missing_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        self.fill_missing_grads();
        Ok(())
    }

    fn fill_missing_grads(&mut self) {
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(g.data_mut());
    }

    fn accumulate_vec(&mut self, v: Var, delta: &[f64]) {
        self.accumulate(v, |g| {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let gd = g.data();
        // Ops are moved out temporarily so the node list can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw) = conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    gd,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(dx) = dx {
                    self.accumulate_vec(*input, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_vec(*weight, &dw);
                }
                if let Some(b) = bias {
                    let p = geom.ho * geom.wo;
                    let mut db = vec![0.0; geom.cout];
                    for n in 0..geom.n {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let base = (n * geom.cout + co) * p;
                            *acc += gd[base..base + p].iter().sum::<f64>();
                        }
                    }
                    self.accumulate_vec(*b, &db);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, ii) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let o = self.value(*weight).shape()[0];
                if self.rg(*input) {
                    let mut dx = vec![0.0; n * ii];
                    gemm(Mat::new(gd, n, o), Mat::new(self.value(*weight).data(), o, ii), 0.0, &mut dx);
                    self.accumulate_vec(*input, &dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; o * ii];
                    gemm(Mat::new(gd, n, o).t(), Mat::new(self.value(*input).data(), n, ii), 0.0, &mut dw);
                    self.accumulate_vec(*weight, &dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate_vec(*b, &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate_vec(*x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate_vec(*a, gd);
                self.accumulate_vec(*b, gd);
            }
            Op::Sub(a, b) => {
                self.accumulate_vec(*a, gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.accumulate_vec(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<f64> = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate_vec(*a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate_vec(*b, &db);
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(*a, |acc| {
                    for (x, g) in acc.iter_mut().zip(gd) {
                        *x += c * g;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(*a, |acc| {
                    for x in acc.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g0 = gd[0];
                let classes = self.value(*logits).shape()[1];
                self.accumulate(*logits, |acc| {
                    for (&(r, c), p) in targets.iter().zip(probs) {
                        let row = &mut acc[r * classes..(r + 1) * classes];
                        for (k, (x, pk)) in row.iter_mut().zip(p).enumerate() {
                            let onehot = if k == c { 1.0 } else { 0.0 };
                            *x += g0 * (pk - onehot);
                        }
                    }
                });
            }
            Op::BilinearSample { feature, taps } => {
                let shape = self.value(*feature).shape();
                let plane = shape[1] * shape[2];
                let bins = taps.len();
                self.accumulate(*feature, |acc| {
                    for (ch, gch) in gd.chunks(bins).enumerate() {
                        let dst = &mut acc[ch * plane..(ch + 1) * plane];
                        for (bin, &gv) in taps.iter().zip(gch) {
                            for &(idx, w) in bin {
                                dst[idx] += w * gv;
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x) => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let inv = 1.0 / area as f64;
                self.accumulate(*x, |acc| {
                    for (chunk, &gv) in acc.chunks_mut(area).zip(gd) {
                        for v in chunk {
                            *v += gv * inv;
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                self.accumulate(*input, |acc| {
                    for (&i, &gv) in index.iter().zip(gd) {
                        acc[i] += gv;
                    }
                });
            }
            Op::Reshape(x) => self.accumulate_vec(*x, gd),
            Op::Stack(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate_vec(x, &gd[offset..offset + n]);
                    offset += n;
                }
            }
            Op::DecodeBoxes { offsets, jacobian } => {
                let mut dt = Vec::with_capacity(gd.len());
                for (g, j) in gd.chunks(4).zip(jacobian) {
                    dt.push(j[0] * (g[0] + g[2]));
                    dt.push(j[1] * (g[1] + g[3]));
                    dt.push(j[2] * (g[2] - g[0]));
                    dt.push(j[3] * (g[3] - g[1]));
                }
                self.accumulate_vec(*offsets, &dt);
            }
            Op::GiouLoss { pred, grads, m } => {
                let scale = -m * gd[0];
                let dp: Vec<f64> = grads.iter().flat_map(|g| g.map(|v| scale * v)).collect();
                self.accumulate_vec(*pred, &dp);
            }
        }
        self.nodes[i].op = op;
    }
}

/// Softmax probabilities and log-sum-exp of one row.
pub fn softmax(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / total).collect();
    (probs, max + total.ln())
}

#[cfg(test)]
mod tests;
