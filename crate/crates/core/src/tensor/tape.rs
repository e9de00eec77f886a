//! Wengert-list autodiff.
//!
//! Every primitive appends a node holding its value and whatever it needs to
//! run its adjoint. Nodes are only ever appended, so inputs always have a
//! smaller index than their consumers and a single reverse sweep suffices.

use super::conv::{col2im, im2col, resize_taps, ConvGeom};
use super::{check_finite, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_test(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(n / stride)`, border mirrored.
    SameReflect,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<T>,
    },
    Pool2 {
        input: Var,
        kind: PoolKind,
        argmax: Vec<u32>,
    },
    Resize2x {
        input: Var,
    },
    Act {
        input: Var,
        act: Activation,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Abs(Var),
    Square(Var),
    Powf(Var, T),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Filter {
        input: Var,
        kernel: Vec<T>,
        k: usize,
    },
    TotalVariation(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of a forward computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of each non-differentiable point every recorded op sits
    /// on: leaky-ReLU, `abs` and total-variation signs, `clamp_min` floors
    /// and max-pool winners. Two evaluations of the same graph with equal
    /// patterns lie on one smooth piece of the loss.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let signs = |out: &mut Vec<u32>, it: &mut dyn Iterator<Item = bool>| out.extend(it.map(u32::from));
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    input,
                    act: Activation::LeakyRelu(_),
                } => signs(&mut out, &mut self.value(*input).data().iter().map(|v| *v > T::zero())),
                Op::Abs(a) => signs(&mut out, &mut self.value(*a).data().iter().map(|v| *v > T::zero())),
                Op::ClampMin(a, floor) => signs(&mut out, &mut self.value(*a).data().iter().map(|v| *v > *floor)),
                Op::Pool2 { argmax, .. } => out.extend_from_slice(argmax),
                Op::TotalVariation(a) => {
                    let x = self.value(*a);
                    let (c, h, w) = tv_dims(x.shape()).expect("checked when recorded");
                    let xd = x.data();
                    for p in xd.chunks(h * w).take(c) {
                        for y in 0..h {
                            for xx in 0..w {
                                let v = p[y * w + xx];
                                if y + 1 < h {
                                    out.push(u32::from(p[(y + 1) * w + xx] > v));
                                }
                                if xx + 1 < w {
                                    out.push(u32::from(p[y * w + xx + 1] > v));
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Register an input. Leaves with `requires_grad == false` act as
    /// constants: gradients flow past them to nothing.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc, k, k2] = ks[..] else {
            return Err(shape_err("conv2d", format!("kernel must be 4-D, got {ks:?}")));
        };
        if kc != c_in || k != k2 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {ks:?} incompatible with input channels {c_in}"),
            ));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!("kernel size {k} must be odd and stride {stride} positive"),
            });
        }
        let pad = match padding {
            Padding::SameReflect => k / 2,
            Padding::Valid => {
                if h < k || w < k {
                    return Err(shape_err("conv2d", format!("{h}x{w} input smaller than {k}x{k} kernel")));
                }
                0
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err("conv2d", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom::new(c_in, h, w, k, stride, pad);
        let mut cols = Vec::new();
        im2col(self.value(input).data(), &geom, &mut cols);
        let n = geom.cols();
        let mut out = vec![T::zero(); c_out * n];
        T::gemm(c_out, geom.rows(), n, self.value(kernel).data(), false, &cols, false, &mut out, false);
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                c_out,
                cols,
            },
        )
    }

    pub fn pool2(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); c * ho * wo];
        let mut argmax = Vec::new();
        let xd = x.data();
        let quarter = T::lit(0.25);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let idx = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let o = &mut out[(ch * ho + oy) * wo + ox];
                    match kind {
                        PoolKind::Avg => *o = (xd[idx[0]] + xd[idx[1]] + xd[idx[2]] + xd[idx[3]]) * quarter,
                        PoolKind::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                            *o = xd[best];
                            argmax.push(best as u32);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push("pool2", value, &[input], Op::Pool2 { input, kind, argmax })
    }

    pub fn resize_bilinear_2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        if h < 2 || w < 2 {
            return Err(shape_err("resize_bilinear_2x", format!("degenerate spatial dims {h}x{w}")));
        }
        let ty = resize_taps::<T>(h);
        let tx = resize_taps::<T>(w);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let row = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
                for (o, &(x0, x1, fx)) in row.iter_mut().zip(&tx) {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    *o = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push("resize_bilinear_2x", value, &[input], Op::Resize2x { input })
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        let value = match act {
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                self.value(input).map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Sigmoid => self.value(input).map(|v| T::one() / (T::one() + (-v).exp())),
        };
        self.push("activation", value, &[input], Op::Act { input, act })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// `weights · flatten(input) + bias` with weights `[M, N]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).len();
        let ws = self.value(weights).shape().to_vec();
        let [m, wn] = ws[..] else {
            return Err(shape_err("dense", format!("weights must be 2-D, got {ws:?}")));
        };
        if wn != n || self.value(bias).shape() != [m] {
            return Err(shape_err(
                "dense",
                format!("input len {n}, weights {ws:?}, bias {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(bias).data().to_vec();
        T::gemm(m, n, 1, self.value(weights).data(), false, self.value(input).data(), false, &mut out, true);
        let value = Tensor::new(vec![m], out)?;
        self.push("dense", value, &[input, weights, bias], Op::Dense { input, weights, bias })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(shape_err(op_name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        self.push(op_name, value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, &[a], Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(a).map(|x| x + c);
        self.push("offset", value, &[a], Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.abs());
        self.push("abs", value, &[a], Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, &[a], Op::Square(a))
    }

    /// `a^p`; non-integer powers of non-positive values are reported as
    /// non-finite.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let p = T::lit(p);
        let value = self.value(a).map(|x| x.powf(p));
        self.push("powf", value, &[a], Op::Powf(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let floor = T::lit(floor);
        let value = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push("clamp_min", value, &[a], Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, &[a], Op::Mean(a))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&refs)?;
        self.push("concat_channels", value, parts, Op::Concat(parts.to_vec()))
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (c, _, _) = x.chw()?;
        let data = (0..c).map(|ch| {
            let p = x.channel(ch);
            p.iter().copied().sum::<T>() / T::from_usize(p.len()).unwrap()
        });
        let value = Tensor::new(vec![c], data.collect())?;
        self.push("global_avg_pool", value, &[a], Op::GlobalAvgPool(a))
    }

    /// Depthwise valid correlation of every channel with one fixed `k×k`
    /// kernel (row-major).
    pub fn filter(&mut self, a: Var, kernel: &[T], k: usize) -> Result<Var> {
        let x = self.value(a);
        let (c, h, w) = x.chw()?;
        if kernel.len() != k * k {
            return Err(shape_err("filter", format!("kernel len {} for k = {k}", kernel.len())));
        }
        if h < k || w < k {
            return Err(shape_err("filter", format!("{h}x{w} smaller than {k}x{k} window")));
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let xd = x.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for i in 0..k {
                for j in 0..k {
                    let kv = kernel[i * k + j];
                    for oy in 0..ho {
                        let srow = &src[(oy + i) * w + j..(oy + i) * w + j + wo];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d = *d + kv * s;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push(
            "filter",
            value,
            &[a],
            Op::Filter {
                input: a,
                kernel: kernel.to_vec(),
                k,
            },
        )
    }

    /// Anisotropic total variation summed over channels; accepts `[H, W]`
    /// or `[C, H, W]`.
    pub fn total_variation(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (c, h, w) = tv_dims(x.shape())?;
        let xd = x.data();
        let mut acc = T::zero();
        for ch in 0..c {
            let p = &xd[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = p[y * w + xx];
                    if y + 1 < h {
                        acc = acc + (p[(y + 1) * w + xx] - v).abs();
                    }
                    if xx + 1 < w {
                        acc = acc + (p[y * w + xx + 1] - v).abs();
                    }
                }
            }
        }
        self.push("total_variation", Tensor::scalar(acc), &[a], Op::TotalVariation(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                c_out,
                cols,
            } => {
                let n = geom.cols();
                let rows = geom.rows();
                if self.wants(*kernel) {
                    let dk = slot(grads, *kernel, self.value(*kernel).len());
                    T::gemm(*c_out, n, rows, g, false, cols, true, dk, true);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db = slot(grads, *b, *c_out);
                        for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                            *d = *d + row.iter().copied().sum::<T>();
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * n];
                    T::gemm(rows, *c_out, n, self.value(*kernel).data(), true, g, false, &mut dcols, false);
                    let dx = slot(grads, *input, self.value(*input).len());
                    col2im(&dcols, geom, dx);
                }
            }
            Op::Pool2 { input, kind, argmax } => {
                if !self.wants(*input) {
                    return;
                }
                let (c, h, w) = self.value(*input).chw().expect("pool input is 3-D");
                let dx = slot(grads, *input, c * h * w);
                match kind {
                    PoolKind::Max => {
                        for (&gi, &src) in g.iter().zip(argmax) {
                            dx[src as usize] = dx[src as usize] + gi;
                        }
                    }
                    PoolKind::Avg => {
                        let (ho, wo) = (h / 2, w / 2);
                        let q = T::lit(0.25);
                        for ch in 0..c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[(ch * ho + oy) * wo + ox] * q;
                                    let base = ch * h * w;
                                    for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let j = base + (2 * oy + dy) * w + 2 * ox + dxo;
                                        dx[j] = dx[j] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Resize2x { input } => {
                if !self.wants(*input) {
                    return;
                }
                let (c, h, w) = self.value(*input).chw().expect("resize input is 3-D");
                let ty = resize_taps::<T>(h);
                let tx = resize_taps::<T>(w);
                let (ho, wo) = (2 * h, 2 * w);
                let dx = slot(grads, *input, c * h * w);
                let one = T::one();
                for ch in 0..c {
                    let d = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let grow = &g[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
                        for (&gv, &(x0, x1, fx)) in grow.iter().zip(&tx) {
                            d[y0 * w + x0] = d[y0 * w + x0] + gv * (one - fy) * (one - fx);
                            d[y0 * w + x1] = d[y0 * w + x1] + gv * (one - fy) * fx;
                            d[y1 * w + x0] = d[y1 * w + x0] + gv * fy * (one - fx);
                            d[y1 * w + x1] = d[y1 * w + x1] + gv * fy * fx;
                        }
                    }
                }
            }
            Op::Act { input, act } => {
                if !self.wants(*input) {
                    return;
                }
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx = slot(grads, *input, x.len());
                match act {
                    Activation::LeakyRelu(slope) => {
                        let s = T::lit(*slope);
                        for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                            *d = *d + if xi > T::zero() { gi } else { gi * s };
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                            *d = *d + gi * yi * (T::one() - yi);
                        }
                    }
                }
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input).data();
                let wv = self.value(*weights).data();
                let (m, n) = (g.len(), x.len());
                if self.wants(*weights) {
                    let dw = slot(grads, *weights, m * n);
                    T::gemm(m, 1, n, g, false, x, false, dw, true);
                }
                if self.wants(*bias) {
                    let db = slot(grads, *bias, m);
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.wants(*input) {
                    let dx = slot(grads, *input, n);
                    T::gemm(n, m, 1, wv, true, g, false, dx, true);
                }
            }
            Op::Add(a, b) => {
                self.broadcast_back(*a, grads, g, |_| T::one());
                self.broadcast_back(*b, grads, g, |_| T::one());
            }
            Op::Sub(a, b) => {
                self.broadcast_back(*a, grads, g, |_| T::one());
                self.broadcast_back(*b, grads, g, |_| -T::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.broadcast_back(*a, grads, g, |j| elem(vb, j));
                self.broadcast_back(*b, grads, g, |j| elem(va, j));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.broadcast_back(*a, grads, g, |j| T::one() / elem(vb, j));
                self.broadcast_back(*b, grads, g, |j| {
                    let bj = elem(vb, j);
                    -elem(va, j) / (bj * bj)
                });
            }
            Op::Scale(a, c) => self.unary_back(*a, grads, g, |_, _| *c),
            Op::Offset(a) => self.unary_back(*a, grads, g, |_, _| T::one()),
            Op::Abs(a) => self.unary_back(*a, grads, g, |x, _| sign(x)),
            Op::Square(a) => self.unary_back(*a, grads, g, |x, _| x + x),
            Op::Powf(a, p) => self.unary_back(*a, grads, g, |x, _| *p * x.powf(*p - T::one())),
            Op::ClampMin(a, floor) => {
                self.unary_back(*a, grads, g, |x, _| if x > *floor { T::one() } else { T::zero() })
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let dx = slot(grads, *a, self.value(*a).len());
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let gv = g[0] / T::from_usize(n).unwrap();
                    let dx = slot(grads, *a, n);
                    dx.iter_mut().for_each(|d| *d = *d + gv);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let dx = slot(grads, p, n);
                        for (d, &gi) in dx.iter_mut().zip(&g[offset..offset + n]) {
                            *d = *d + gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.wants(*a) {
                    let (c, h, w) = self.value(*a).chw().expect("pool input is 3-D");
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let dx = slot(grads, *a, c * h * w);
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        dx[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|d| *d = *d + gv);
                    }
                }
            }
            Op::Filter { input, kernel, k } => {
                if !self.wants(*input) {
                    return;
                }
                let (c, h, w) = self.value(*input).chw().expect("filter input is 3-D");
                let (ho, wo) = (h - k + 1, w - k + 1);
                let dx = slot(grads, *input, c * h * w);
                for ch in 0..c {
                    let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
                    let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for i in 0..*k {
                        for j in 0..*k {
                            let kv = kernel[i * k + j];
                            for oy in 0..ho {
                                let grow = &gp[oy * wo..(oy + 1) * wo];
                                let drow = &mut dp[(oy + i) * w + j..(oy + i) * w + j + wo];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d = *d + kv * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::TotalVariation(a) => {
                if !self.wants(*a) {
                    return;
                }
                let x = self.value(*a);
                let (c, h, w) = tv_dims(x.shape()).expect("validated in forward");
                let xd = x.data();
                let dx = slot(grads, *a, xd.len());
                let gv = g[0];
                for ch in 0..c {
                    let o = ch * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i0 = o + y * w + xx;
                            if y + 1 < h {
                                let i1 = i0 + w;
                                let s = sign(xd[i1] - xd[i0]) * gv;
                                dx[i1] = dx[i1] + s;
                                dx[i0] = dx[i0] - s;
                            }
                            if xx + 1 < w {
                                let i1 = i0 + 1;
                                let s = sign(xd[i1] - xd[i0]) * gv;
                                dx[i1] = dx[i1] + s;
                                dx[i0] = dx[i0] - s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, a: Var, grads: &mut [Option<Vec<T>>], g: &[T], d: impl Fn(T, usize) -> T) {
        if !self.wants(a) {
            return;
        }
        let x = self.value(a).data();
        let dx = slot(grads, a, x.len());
        for (j, ((out, &gi), &xi)) in dx.iter_mut().zip(g).zip(x).enumerate() {
            *out = *out + gi * d(xi, j);
        }
    }

    /// Accumulate `g ⊙ local` into operand `v`, summing when `v` was a
    /// broadcast scalar.
    fn broadcast_back(&self, v: Var, grads: &mut [Option<Vec<T>>], g: &[T], local: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).len();
        let dv = slot(grads, v, n);
        if n == g.len() {
            for (j, (d, &gi)) in dv.iter_mut().zip(g).enumerate() {
                *d = *d + gi * local(j);
            }
        } else {
            let total: T = g.iter().enumerate().map(|(j, &gi)| gi * local(j)).sum();
            dv[0] = dv[0] + total;
        }
    }
}

#[inline]
fn elem<T: Real>(t: &Tensor<T>, j: usize) -> T {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn tv_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err("total_variation", format!("expected 2-D or 3-D, got {shape:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(shape_err("total_variation", format!("degenerate spatial dims {h}x{w}")));
    }
    Ok((c, h, w))
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to leaf `v`; zeros when the loss
    /// does not depend on `v` or `v` was registered without gradients.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        self.grads[v.0]
            .as_ref()
            .is_none_or(|g| g.iter().all(|x| *x == T::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` with respect to every input.
    fn check_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-4;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, x)| {
                            let mut x = x.clone();
                            if m == k {
                                x.data_mut()[j] += delta;
                            }
                            t.leaf(x, true)
                        })
                        .collect();
                    let l = f(&mut t, &vs);
                    t.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k} elem {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let w = random(tape.value(v).shape(), seed);
        let w = tape.constant(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_fn(&[1, 4, 5], |i| i as f32);
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(xv, k, None, 1, Padding::SameReflect).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_averaging_preserves_constant() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::full(&[1, 6, 6], 2.5));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(xv, k, None, 1, Padding::SameReflect).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_grad(&[random(&[1, 5, 5], 1), random(&[1, 1, 3, 3], 2)], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::SameReflect).unwrap();
            weighted_sum(t, y, 3)
        });
        check_grad(
            &[random(&[2, 6, 7], 4), random(&[3, 2, 3, 3], 5), random(&[3], 6)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::SameReflect).unwrap();
                weighted_sum(t, y, 7)
            },
        );
        check_grad(&[random(&[2, 5, 5], 8), random(&[1, 2, 3, 3], 9)], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Valid).unwrap();
            weighted_sum(t, y, 10)
        });
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, k, None, 1, Padding::SameReflect).is_err());
        let k = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, k, None, 1, Padding::SameReflect).is_err());
    }

    #[test]
    fn pooling_values_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let m = tape.pool2(x, PoolKind::Max).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[1, 4, 4], 3.0));
        let a = tape.pool2(c, PoolKind::Avg).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 3.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random(&[2, 4, 6], 11), true);
        let a = tape.pool2(x, PoolKind::Avg).unwrap();
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert!(g.data().iter().all(|&v| v == 0.25));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap(), true);
        let m = tape.pool2(x, PoolKind::Max).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.pool2(x, PoolKind::Avg).is_err());

        check_grad(&[random(&[2, 4, 4], 12)], |t, v| {
            let y = t.pool2(v[0], PoolKind::Max).unwrap();
            weighted_sum(t, y, 13)
        });
    }

    #[test]
    fn resize_preserves_constants_and_ramps() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[1, 3, 4], 1.5));
        let r = tape.resize_bilinear_2x(c).unwrap();
        assert_eq!(tape.value(r).shape(), &[1, 6, 8]);
        assert!(tape.value(r).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));

        let w = 5;
        let ramp = tape.constant(Tensor::from_fn(&[1, 2, w], |i| 3.0 * (i % w) as f64 - 1.0));
        let r = tape.resize_bilinear_2x(ramp).unwrap();
        let out = tape.value(r).data().to_vec();
        let step = 3.0 * (w - 1) as f64 / (2 * w - 1) as f64;
        for row in out.chunks(2 * w) {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - (-1.0 + step * j as f64)).abs() < 1e-12);
            }
        }
        check_grad(&[random(&[2, 3, 4], 14)], |t, v| {
            let y = t.resize_bilinear_2x(v[0]).unwrap();
            weighted_sum(t, y, 15)
        });
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, -1.0]).unwrap(), true);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let l = tape.leaky_relu(x, 0.1).unwrap();
        assert!((tape.value(l).data()[1] + 0.1).abs() < 1e-15);
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap().get(x);
        assert!((g.data()[0] - 0.25).abs() < 1e-15);
        check_grad(&[random(&[7], 16)], |t, v| {
            let a = t.sigmoid(v[0]).unwrap();
            let b = t.leaky_relu(v[0], 0.1).unwrap();
            let c = t.mul(a, b).unwrap();
            weighted_sum(t, c, 17)
        });
    }

    #[test]
    fn dense_values_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), true);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, 3.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

        check_grad(&[random(&[4], 18), random(&[3, 4], 19), random(&[3], 20)], |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 21)
        });
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
        let unused = tape.leaf(Tensor::zeros(&[2]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, -4.0, 6.0]);
        assert!(grads.is_zero(unused));
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(sq), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        check_grad(
            &[random(&[1, 8, 8], 22), random(&[2, 1, 3, 3], 23), random(&[3, 32], 24), random(&[3], 25)],
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, Padding::SameReflect).unwrap();
                let a = t.leaky_relu(c, 0.1).unwrap();
                let p = t.pool2(a, PoolKind::Avg).unwrap();
                let d = t.dense(p, v[2], v[3]).unwrap();
                let s = t.sigmoid(d).unwrap();
                weighted_sum(t, s, 26)
            },
        );
    }

    #[test]
    fn arithmetic_and_reductions_match_finite_differences() {
        check_grad(&[random(&[2, 3, 3], 27), random(&[2, 3, 3], 28)], |t, v| {
            let b = t.offset(v[1], 3.0).unwrap();
            let q = t.div(v[0], b).unwrap();
            let s = t.sub(q, v[0]).unwrap();
            let a = t.abs(s).unwrap();
            let m = t.mean(a).unwrap();
            let sq = t.square(v[1]).unwrap();
            let pw = t.offset(sq, 0.5).unwrap();
            let pw = t.powf(pw, 0.7).unwrap();
            let pm = t.mean(pw).unwrap();
            let r = t.mul(pw, m).unwrap(); // scalar broadcast
            let r = t.sum(r).unwrap();
            let r = t.add(r, pm).unwrap();
            t.scale(r, 1.3).unwrap()
        });
        check_grad(&[random(&[2, 6, 6], 29), random(&[1, 6, 6], 30)], |t, v| {
            let c = t.concat_channels(&[v[0], v[1]]).unwrap();
            let k: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
            let f = t.filter(c, &k, 3).unwrap();
            let g = t.global_avg_pool(f).unwrap();
            let tv = t.total_variation(c).unwrap();
            let cl = t.clamp_min(g, -0.05).unwrap();
            let s = weighted_sum(t, cl, 31);
            t.add(s, tv).unwrap()
        });
    }

    #[test]
    fn total_variation_by_hand() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let tv = tape.total_variation(x).unwrap();
        assert_eq!(tape.value(tv).item(), 2.0);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let z = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(matches!(tape.div(x, z), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn frozen_leaves_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let frozen = tape.leaf(random(&[3], 32), false);
        let x = tape.leaf(random(&[3], 33), true);
        let p = tape.mul(frozen, x).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.is_zero(frozen));
        assert_eq!(grads.get(x), tape.value(frozen).clone());
    }
}
