//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns every intermediate value of a computation as a node in a
//! flat, topologically ordered list. [`Tensor`] is a copyable handle (an index
//! into that list). Running [`Tape::backward`] from a scalar root walks the
//! list once in reverse, accumulating gradients additively so values used by
//! several consumers receive the sum of their downstream contributions.
//!
//! Conventions baked in here:
//! * everything is `f64`;
//! * binary elementwise ops demand identical shapes, broadcasting is explicit
//!   via [`Tape::broadcast_to`] with trailing-dimension alignment;
//! * the subgradient of `max(x, c)` (and `relu`) at the kink is 0.

use std::collections::HashMap;

use crate::array::{strides_of, Array};
use crate::error::{Error, Result};

/// Handle to a tape node. Cheap to copy, only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// A regression target for the IoU loss: one positive location and its
/// left/top/right/bottom distances in image pixels.
#[derive(Clone, Debug)]
pub struct IouTarget {
    pub n: usize,
    pub y: usize,
    pub x: usize,
    pub ltrb: [f64; 4],
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// scale * x + shift; only the scale matters to the backward pass.
    Affine { x: Tensor, scale: f64 },
    MaxConst { x: Tensor, c: f64 },
    Log(Tensor),
    Exp(Tensor),
    PowConst { x: Tensor, e: f64 },
    Relu(Tensor),
    Sigmoid(Tensor),
    /// Softmax over the channel axis of an NCHW map.
    SoftmaxChannels(Tensor),
    Reshape(Tensor),
    BroadcastTo(Tensor),
    Concat { parts: Vec<Tensor>, axis: usize },
    SumAxes { x: Tensor, axes: Vec<usize> },
    Conv2d { x: Tensor, w: Tensor, b: Tensor, stride: usize, padding: usize },
    Upsample2x(Tensor),
    /// Identity forward, gradient scaled by -lambda on the way back.
    Grl { x: Tensor, lambda: f64 },
    /// Mean of -ln(IoU) over a fixed set of positive locations.
    IouLoss { reg: Tensor, targets: Vec<IouTarget> },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    pub(crate) param_binds: Vec<(u64, Tensor)>,
    pub(crate) param_index: HashMap<u64, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node { value, op, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Tensor {
        self.constant(Array::scalar(v))
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `t`, if one was
    /// produced.
    pub fn grad(&self, t: Tensor) -> Option<&Array> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    fn needs(&self, inputs: &[Tensor]) -> bool {
        inputs.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (o, &v) in out.data_mut().iter_mut().zip(bd) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (o, &v) in out.data_mut().iter_mut().zip(bd) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (o, &v) in out.data_mut().iter_mut().zip(bd) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn affine(&mut self, x: Tensor, scale: f64, shift: f64) -> Tensor {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.needs(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Tensor, s: f64) -> Tensor {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Tensor {
        self.affine(x, 1.0, c)
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.affine(x, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, x: Tensor) -> Tensor {
        self.affine(x, -1.0, 1.0)
    }

    pub fn max_const(&mut self, x: Tensor, c: f64) -> Tensor {
        let out = self.value(x).map(|v| v.max(c));
        let rg = self.needs(&[x]);
        self.push(out, Op::MaxConst { x, c }, rg)
    }

    pub fn log(&mut self, x: Tensor) -> Tensor {
        let out = self.value(x).map(f64::ln);
        let rg = self.needs(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        let out = self.value(x).map(f64::exp);
        let rg = self.needs(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn pow_const(&mut self, x: Tensor, e: f64) -> Tensor {
        let out = self.value(x).map(|v| v.powf(e));
        let rg = self.needs(&[x]);
        self.push(out, Op::PowConst { x, e }, rg)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let out = self.value(x).map(sigmoid);
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax over axis 1 of an `[N, M, H, W]` map, computed per pixel.
    pub fn softmax_channels(&mut self, x: Tensor) -> Result<Tensor> {
        let v = self.value(x);
        if v.ndim() != 4 {
            return Err(Error::shape("softmax_channels", format!("want NCHW, got {:?}", v.shape())));
        }
        let [n, m, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let hw = h * w;
        let mut out = Array::zeros(v.shape());
        {
            let xd = v.data();
            let od = out.data_mut();
            for i in 0..n {
                for p in 0..hw {
                    let base = i * m * hw + p;
                    let mut mx = f64::NEG_INFINITY;
                    for c in 0..m {
                        mx = mx.max(xd[base + c * hw]);
                    }
                    let mut z = 0.0;
                    for c in 0..m {
                        let e = (xd[base + c * hw] - mx).exp();
                        od[base + c * hw] = e;
                        z += e;
                    }
                    for c in 0..m {
                        od[base + c * hw] /= z;
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxChannels(x), rg))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Broadcast `x` to `shape` with trailing-dimension alignment: missing
    /// leading dims act as size 1, and every size-1 dim is repeated.
    pub fn broadcast_to(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let src = self.value(x);
        let plan = broadcast_plan(src.shape(), shape)?;
        let mut out = Array::zeros(shape);
        {
            let sd = src.data();
            let od = out.data_mut();
            for (i, o) in od.iter_mut().enumerate() {
                *o = sd[plan.source_offset(i)];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} out of range for {:?}", axis, first)));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", s, first, axis)));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Array::zeros(&shape);
        {
            let od = out.data_mut();
            let mut offset = 0usize;
            for &p in parts {
                let s = self.value(p).shape().to_vec();
                let pd = self.value(p).data();
                let width = s[axis] * inner;
                for o in 0..outer {
                    let dst = o * axis_total * inner + offset * inner;
                    let src = o * width;
                    od[dst..dst + width].copy_from_slice(&pd[src..src + width]);
                }
                offset += s[axis];
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    // ---- reductions ----

    /// Sum over the given axes; the reduced axes are dropped from the shape.
    /// Summing over every axis yields a rank-0 scalar.
    pub fn sum_axes(&mut self, x: Tensor, axes: &[usize]) -> Result<Tensor> {
        let src = self.value(x);
        let axes = normalize_axes(axes, src.ndim())?;
        let out_shape: Vec<usize> = src
            .shape()
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let mut out = Array::zeros(&out_shape);
        {
            let reduced = ReduceMap::new(src.shape(), &axes);
            let sd = src.data();
            let od = out.data_mut();
            for (i, &v) in sd.iter().enumerate() {
                od[reduced.out_offset(i)] += v;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SumAxes { x, axes }, rg))
    }

    pub fn mean_axes(&mut self, x: Tensor, axes: &[usize]) -> Result<Tensor> {
        let ndim = self.value(x).ndim();
        let axes = normalize_axes(axes, ndim)?;
        let count: usize = axes.iter().map(|&d| self.value(x).shape()[d]).product();
        let s = self.sum_axes(x, &axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.mean_axes(x, &axes)
    }

    // ---- structured ----

    /// 2-D convolution, NCHW activations, `[C_out, C_in, k, k]` weights,
    /// per-output-channel bias, zero padding.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("want x NCHW, w [Co,Ci,k,k], b [Co]; got {:?}, {:?}, {:?}", xs, ws, bs),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {:?}", ws)));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs[0] != ws[0] {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} channels but weight produces {}", bs[0], ws[0]),
            ));
        }
        let (n, ci, h, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wi + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} too large for padded input {}x{}", k, h + 2 * padding, wi + 2 * padding),
            ));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wi + 2 * padding - k) / stride + 1;
        let mut out = Array::zeros(&[n, co, ho, wo]);
        conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
            ConvDims { n, ci, h, w: wi, co, k, stride, padding, ho, wo },
        );
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }, rg))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW map.
    pub fn upsample2x(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("want NCHW, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Array::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let sd = self.value(x).data();
            let od = out.data_mut();
            for nc in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = sd[(nc * h + y) * w + xx];
                        let row0 = (nc * 2 * h + 2 * y) * 2 * w + 2 * xx;
                        let row1 = row0 + 2 * w;
                        od[row0] = v;
                        od[row0 + 1] = v;
                        od[row1] = v;
                        od[row1 + 1] = v;
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Gradient reversal: identity on the forward pass; on the backward pass
    /// the incoming gradient is multiplied by `-lambda` before flowing on.
    pub fn grl(&mut self, x: Tensor, lambda: f64) -> Result<Tensor> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("grl lambda must be >= 0, got {lambda}")));
        }
        let out = self.value(x).clone();
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Grl { x, lambda }, rg))
    }

    /// Mean over positives of -ln(IoU(pred, target)). `reg` is `[N,4,H,W]`
    /// holding non-negative left/top/right/bottom distances. With no positives
    /// the loss is 0 and the input receives a zero gradient.
    pub fn iou_loss(&mut self, reg: Tensor, targets: Vec<IouTarget>) -> Result<Tensor> {
        let s = self.value(reg).shape();
        if s.len() != 4 || s[1] != 4 {
            return Err(Error::shape("iou_loss", format!("want [N,4,H,W], got {:?}", s)));
        }
        for t in &targets {
            if t.n >= s[0] || t.y >= s[2] || t.x >= s[3] {
                return Err(Error::invalid(format!(
                    "iou_loss target ({}, {}, {}) outside [{}, {}, {}]",
                    t.n, t.y, t.x, s[0], s[2], s[3]
                )));
            }
        }
        let mut total = 0.0;
        for t in &targets {
            let pred = read_ltrb(self.value(reg), t);
            total += -iou_ltrb(pred, t.ltrb).max(1e-12).ln();
        }
        let value = if targets.is_empty() { 0.0 } else { total / targets.len() as f64 };
        let rg = self.needs(&[reg]);
        Ok(self.push(Array::scalar(value), Op::IouLoss { reg, targets }, rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients from earlier backward
    /// calls on this tape are discarded.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot { shape: self.value(root).shape().to_vec() });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[root.0] = Some(Array::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, after) = self.grads.split_at_mut(i);
            let gout = match after[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            // Inputs always precede their consumer on the tape, so they live
            // in `before`.
            let nodes = &self.nodes;
            let mut sink = |t: Tensor, update: &mut dyn FnMut(&mut Array)| {
                if !nodes[t.0].requires_grad {
                    return;
                }
                let slot = &mut before[t.0];
                if slot.is_none() {
                    *slot = Some(Array::zeros(nodes[t.0].value.shape()));
                }
                update(slot.as_mut().unwrap());
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    sink(*a, &mut |g| accumulate(g, gout, 1.0));
                    sink(*b, &mut |g| accumulate(g, gout, 1.0));
                }
                Op::Sub(a, b) => {
                    sink(*a, &mut |g| accumulate(g, gout, 1.0));
                    sink(*b, &mut |g| accumulate(g, gout, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    sink(*a, &mut |g| accumulate_prod(g, gout, bv));
                    sink(*b, &mut |g| accumulate_prod(g, gout, av));
                }
                Op::Affine { x, scale } => {
                    sink(*x, &mut |g| accumulate(g, gout, *scale));
                }
                Op::MaxConst { x, c } => {
                    let xv = &nodes[x.0].value;
                    sink(*x, &mut |g| {
                        for ((g, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                            if v > *c {
                                *g += go;
                            }
                        }
                    });
                }
                Op::Log(x) => {
                    let xv = &nodes[x.0].value;
                    sink(*x, &mut |g| {
                        for ((g, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                            *g += go / v;
                        }
                    });
                }
                Op::Exp(x) => {
                    let yv = &nodes[i].value;
                    sink(*x, &mut |g| accumulate_prod(g, gout, yv));
                }
                Op::PowConst { x, e } => {
                    let xv = &nodes[x.0].value;
                    sink(*x, &mut |g| {
                        for ((g, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                            *g += go * *e * v.powf(*e - 1.0);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    sink(*x, &mut |g| {
                        for ((g, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                            if v > 0.0 {
                                *g += go;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &nodes[i].value;
                    sink(*x, &mut |g| {
                        for ((g, &go), &s) in g.data_mut().iter_mut().zip(gout.data()).zip(yv.data()) {
                            *g += go * s * (1.0 - s);
                        }
                    });
                }
                Op::SoftmaxChannels(x) => {
                    let yv = &nodes[i].value;
                    let s = yv.shape();
                    let (n, m, hw) = (s[0], s[1], s[2] * s[3]);
                    sink(*x, &mut |g| {
                        let gd = g.data_mut();
                        let pd = yv.data();
                        let god = gout.data();
                        for img in 0..n {
                            for p in 0..hw {
                                let base = img * m * hw + p;
                                let mut dot = 0.0;
                                for c in 0..m {
                                    let idx = base + c * hw;
                                    dot += pd[idx] * god[idx];
                                }
                                for c in 0..m {
                                    let idx = base + c * hw;
                                    gd[idx] += pd[idx] * (god[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    sink(*x, &mut |g| accumulate(g, gout, 1.0));
                }
                Op::BroadcastTo(x) => {
                    let src_shape = nodes[x.0].value.shape().to_vec();
                    let plan = broadcast_plan(&src_shape, nodes[i].value.shape())
                        .expect("validated at construction");
                    sink(*x, &mut |g| {
                        let gd = g.data_mut();
                        for (j, &go) in gout.data().iter().enumerate() {
                            gd[plan.source_offset(j)] += go;
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let out_shape = nodes[i].value.shape().to_vec();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let axis_total = out_shape[*axis];
                    let mut offset = 0usize;
                    for &p in parts {
                        let width = nodes[p.0].value.shape()[*axis] * inner;
                        let start = offset * inner;
                        sink(p, &mut |g| {
                            let gd = g.data_mut();
                            let god = gout.data();
                            for o in 0..outer {
                                let src = o * axis_total * inner + start;
                                let dst = o * width;
                                for j in 0..width {
                                    gd[dst + j] += god[src + j];
                                }
                            }
                        });
                        offset += nodes[p.0].value.shape()[*axis];
                    }
                }
                Op::SumAxes { x, axes } => {
                    let src_shape = nodes[x.0].value.shape().to_vec();
                    let reduced = ReduceMap::new(&src_shape, axes);
                    sink(*x, &mut |g| {
                        let gd = g.data_mut();
                        let god = gout.data();
                        for (j, g) in gd.iter_mut().enumerate() {
                            *g += god[reduced.out_offset(j)];
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let xs = nodes[x.0].value.shape();
                    let ws = nodes[w.0].value.shape();
                    let os = nodes[i].value.shape();
                    let dims = ConvDims {
                        n: xs[0],
                        ci: xs[1],
                        h: xs[2],
                        w: xs[3],
                        co: ws[0],
                        k: ws[2],
                        stride: *stride,
                        padding: *padding,
                        ho: os[2],
                        wo: os[3],
                    };
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    sink(*x, &mut |g| conv2d_backward_x(g.data_mut(), gout.data(), wv.data(), dims));
                    sink(*w, &mut |g| conv2d_backward_w(g.data_mut(), gout.data(), xv.data(), dims));
                    sink(*b, &mut |g| {
                        let gd = g.data_mut();
                        let god = gout.data();
                        let plane = dims.ho * dims.wo;
                        for img in 0..dims.n {
                            for c in 0..dims.co {
                                let base = (img * dims.co + c) * plane;
                                let mut acc = 0.0;
                                for p in 0..plane {
                                    acc += god[base + p];
                                }
                                gd[c] += acc;
                            }
                        }
                    });
                }
                Op::Upsample2x(x) => {
                    let s = nodes[x.0].value.shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    sink(*x, &mut |g| {
                        let gd = g.data_mut();
                        let god = gout.data();
                        for nc in 0..n * c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let row0 = (nc * 2 * h + 2 * y) * 2 * w + 2 * xx;
                                    let row1 = row0 + 2 * w;
                                    gd[(nc * h + y) * w + xx] +=
                                        god[row0] + god[row0 + 1] + god[row1] + god[row1 + 1];
                                }
                            }
                        }
                    });
                }
                Op::Grl { x, lambda } => {
                    let neg = -*lambda;
                    sink(*x, &mut |g| accumulate(g, gout, neg));
                }
                Op::IouLoss { reg, targets } => {
                    // With no targets this sinks a zero gradient, keeping the
                    // regression branch connected for optimizers that treat
                    // bound-but-gradient-free parameters as an error.
                    let go = gout.item() / targets.len().max(1) as f64;
                    let regv = &nodes[reg.0].value;
                    let shape = regv.shape().to_vec();
                    let plane = shape[2] * shape[3];
                    sink(*reg, &mut |g| {
                        let gd = g.data_mut();
                        for t in targets {
                            let pred = read_ltrb(regv, t);
                            let grad4 = iou_loss_grad(pred, t.ltrb);
                            let base = t.n * 4 * plane + t.y * shape[3] + t.x;
                            for ch in 0..4 {
                                gd[base + ch * plane] += go * grad4[ch];
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(g: &mut Array, gout: &Array, scale: f64) {
    for (g, &go) in g.data_mut().iter_mut().zip(gout.data()) {
        *g += scale * go;
    }
}

fn accumulate_prod(g: &mut Array, gout: &Array, other: &Array) {
    for ((g, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(other.data()) {
        *g += go * v;
    }
}

fn normalize_axes(axes: &[usize], ndim: usize) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.len() != axes.len() {
        return Err(Error::invalid(format!("duplicate reduction axes {:?}", axes)));
    }
    if let Some(&bad) = out.iter().find(|&&d| d >= ndim) {
        return Err(Error::invalid(format!("axis {} out of range for rank {}", bad, ndim)));
    }
    Ok(out)
}

/// Maps flat input offsets to flat output offsets for an axis reduction.
struct ReduceMap {
    in_strides: Vec<usize>,
    in_shape: Vec<usize>,
    /// Output stride per input dim; 0 for reduced dims.
    out_stride_per_dim: Vec<usize>,
}

impl ReduceMap {
    fn new(in_shape: &[usize], axes: &[usize]) -> Self {
        let in_strides = strides_of(in_shape);
        let kept: Vec<usize> = (0..in_shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&d| in_shape[d]).collect();
        let out_strides = strides_of(&out_shape);
        let mut out_stride_per_dim = vec![0usize; in_shape.len()];
        for (j, &d) in kept.iter().enumerate() {
            out_stride_per_dim[d] = out_strides[j];
        }
        ReduceMap { in_strides, in_shape: in_shape.to_vec(), out_stride_per_dim }
    }

    #[inline]
    fn out_offset(&self, flat_in: usize) -> usize {
        let mut rem = flat_in;
        let mut out = 0usize;
        for d in 0..self.in_shape.len() {
            let c = rem / self.in_strides[d];
            rem %= self.in_strides[d];
            out += c * self.out_stride_per_dim[d];
        }
        out
    }
}

/// Precomputed index plan for trailing-aligned broadcasting.
struct BroadcastPlan {
    out_strides: Vec<usize>,
    /// Source stride per output dim; 0 where the source dim is 1 or absent.
    src_stride_per_dim: Vec<usize>,
}

fn broadcast_plan(src: &[usize], dst: &[usize]) -> Result<BroadcastPlan> {
    if src.len() > dst.len() {
        return Err(Error::shape("broadcast_to", format!("{:?} has higher rank than {:?}", src, dst)));
    }
    let offset = dst.len() - src.len();
    let src_strides = strides_of(src);
    let mut src_stride_per_dim = vec![0usize; dst.len()];
    for (j, &s) in src.iter().enumerate() {
        let d = j + offset;
        if s == dst[d] {
            src_stride_per_dim[d] = src_strides[j];
        } else if s == 1 {
            src_stride_per_dim[d] = 0;
        } else {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {:?} (dim {})", src, dst, d),
            ));
        }
    }
    Ok(BroadcastPlan { out_strides: strides_of(dst), src_stride_per_dim })
}

impl BroadcastPlan {
    #[inline]
    fn source_offset(&self, flat_out: usize) -> usize {
        let mut rem = flat_out;
        let mut src = 0usize;
        for d in 0..self.out_strides.len() {
            let c = rem / self.out_strides[d];
            rem %= self.out_strides[d];
            src += c * self.src_stride_per_dim[d];
        }
        src
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Per output element the accumulator starts at the bias and adds terms in
/// (ci, ky, kx) order, skipping padded positions; a plain six-loop reference
/// with the same ordering reproduces this bit for bit.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], d: ConvDims) {
    let xplane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for n in 0..d.n {
        for co in 0..d.co {
            let obase = (n * d.co + co) * oplane;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = b[co];
                    for ci in 0..d.ci {
                        let xbase = (n * d.ci + ci) * xplane;
                        let wbase = ((co * d.ci + ci) * d.k) * d.k;
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * d.w;
                            let wrow = wbase + ky * d.k;
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * w[wrow + kx];
                            }
                        }
                    }
                    out[obase + oy * d.wo + ox] = acc;
                }
            }
        }
    }
}

fn conv2d_backward_x(gx: &mut [f64], gout: &[f64], w: &[f64], d: ConvDims) {
    let xplane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for n in 0..d.n {
        for co in 0..d.co {
            let obase = (n * d.co + co) * oplane;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let go = gout[obase + oy * d.wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..d.ci {
                        let xbase = (n * d.ci + ci) * xplane;
                        let wbase = ((co * d.ci + ci) * d.k) * d.k;
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * d.w;
                            let wrow = wbase + ky * d.k;
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                gx[xrow + ix as usize] += go * w[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_w(gw: &mut [f64], gout: &[f64], x: &[f64], d: ConvDims) {
    let xplane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for n in 0..d.n {
        for co in 0..d.co {
            let obase = (n * d.co + co) * oplane;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let go = gout[obase + oy * d.wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..d.ci {
                        let xbase = (n * d.ci + ci) * xplane;
                        let wbase = ((co * d.ci + ci) * d.k) * d.k;
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * d.w;
                            let wrow = wbase + ky * d.k;
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                gw[wrow + kx] += go * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn read_ltrb(reg: &Array, t: &IouTarget) -> [f64; 4] {
    [
        reg.at4(t.n, 0, t.y, t.x),
        reg.at4(t.n, 1, t.y, t.x),
        reg.at4(t.n, 2, t.y, t.x),
        reg.at4(t.n, 3, t.y, t.x),
    ]
}

/// IoU of two boxes given as (l, t, r, b) distances from a shared point.
pub fn iou_ltrb(p: [f64; 4], q: [f64; 4]) -> f64 {
    let iw = p[0].min(q[0]) + p[2].min(q[2]);
    let ih = p[1].min(q[1]) + p[3].min(q[3]);
    let inter = iw * ih;
    let area_p = (p[0] + p[2]) * (p[1] + p[3]);
    let area_q = (q[0] + q[2]) * (q[1] + q[3]);
    let union = area_p + area_q - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// d(-ln IoU)/d pred. With I the intersection and U the union,
/// d(-ln(I/U)) = dU/U - dI/I; min(p, q) contributes to I only while p < q
/// (ties take the zero branch, matching the max_const convention).
fn iou_loss_grad(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let iw = p[0].min(q[0]) + p[2].min(q[2]);
    let ih = p[1].min(q[1]) + p[3].min(q[3]);
    let inter = (iw * ih).max(1e-12);
    let area_p = (p[0] + p[2]) * (p[1] + p[3]);
    let area_q = (q[0] + q[2]) * (q[1] + q[3]);
    let union = (area_p + area_q - inter).max(1e-12);
    let mut out = [0.0; 4];
    // dI/dp per side: the opposite pair fixes the other factor.
    let dinter = [
        if p[0] < q[0] { ih } else { 0.0 },
        if p[1] < q[1] { iw } else { 0.0 },
        if p[2] < q[2] { ih } else { 0.0 },
        if p[3] < q[3] { iw } else { 0.0 },
    ];
    let darea = [p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]];
    for i in 0..4 {
        let dunion = darea[i] - dinter[i];
        out[i] = dunion / union - dinter[i] / inter;
    }
    out
}
