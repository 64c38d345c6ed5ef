use super::conv::{col2im, im2col, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction / normalization axis of a `[C, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Across channels at each pixel.
    Channel,
    /// Across all pixels of each channel.
    Spatial,
    /// Every element.
    All,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_h: usize,
        out_w: usize,
        cols: Vec<T>,
    },
    ChannelMatmul {
        weight: Var,
        input: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Clamp01 {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: Axis,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    ReduceSum {
        x: Var,
        axis: Axis,
    },
    AvgPool {
        x: Var,
        ratio: usize,
    },
    NormalizeGroups {
        x: Var,
        group: usize,
    },
    BlockFilter {
        x: Var,
        kernel: Var,
    },
    L1 {
        a: Var,
        b: Var,
        mask: Option<Var>,
    },
    KlDiv {
        x: Var,
        target: T,
        mask: Option<Var>,
        mean: bool,
    },
}

/// Lower clamp applied to abundances before the logarithms of the KL term.
pub const KL_FLOOR: f64 = 1e-6;

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dims3<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    t.dims3()
        .ok_or_else(|| Error::shape(op, format!("expected [C, H, W], got {:?}", t.shape())))
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(g.data_mut());
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        Ok(self.push(value, op, rg))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("param", value.data())?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("constant", value.data())?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// 2-D cross-correlation of `[C, H, W]` input with `[O, C, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = dims3("conv2d", self.value(input))?;
        let (o, k) = match self.value(kernel).shape()[..] {
            [o, kc, k1, k2] if kc == c && k1 == k2 => (o, k1),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {:?} incompatible with {} input channels", s, c),
                ))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.value(b).shape(), o)));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (out_h, out_w) = geom
            .out_extent()
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} stride {} on {}x{}", k, stride, h, w)))?;
        let n = out_h * out_w;
        let cols = im2col(self.value(input).data(), &geom, out_h, out_w);
        let mut out = vec![T::zero(); o * n];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(o, geom.col_rows(), n, self.value(kernel).data(), false, &cols, false, beta, &mut out);
        let value = Tensor::new(vec![o, out_h, out_w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_h,
                out_w,
                cols,
            },
            &inputs,
        )
    }

    /// Per-pixel channel mixing `[O, C] x [C, H, W] -> [O, H, W]` (1x1 conv, no bias).
    pub fn channel_matmul(&mut self, weight: Var, input: Var) -> Result<Var> {
        let (c, h, w) = dims3("channel_matmul", self.value(input))?;
        let o = match self.value(weight).shape()[..] {
            [o, wc] if wc == c => o,
            ref s => return Err(Error::shape("channel_matmul", format!("weight {:?} for {} channels", s, c))),
        };
        let mut out = vec![T::zero(); o * h * w];
        T::gemm(o, c, h * w, self.value(weight).data(), false, self.value(input).data(), false, T::zero(), &mut out);
        let value = Tensor::new(vec![o, h, w], out)?;
        self.record("channel_matmul", value, Op::ChannelMatmul { weight, input }, &[weight, input])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(format!("leaky slope {} outside (0, 1)", slope)));
        }
        let s = T::from_f64(slope);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v >= T::zero() { v } else { v * s }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.record("leaky_relu", value, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.record("clamp01", value, Op::Clamp01 { x }, &[x])
    }

    /// Softmax with max subtraction. `Axis::All` normalizes the whole tensor.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("softmax", "empty input"));
        }
        let mut out = xv.data().to_vec();
        for_each_group(xv.shape(), axis, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in idx.clone() {
                out[i] = (out[i] - m).exp();
                total = total + out[i];
            }
            for i in idx {
                out[i] = out[i] / total;
            }
        })?;
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Concatenate along channels; spatial extents must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = dims3("concat_channels", self.value(a))?;
        let (cb, hb, wb) = dims3("concat_channels", self.value(b))?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", format!("{}x{} vs {}x{}", ha, wa, hb, wb)));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        self.record("concat_channels", value, Op::Concat { a, b }, &[a, b])
    }

    /// Elementwise product; `b` may broadcast along any unit extent of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let map = BroadcastMap::new("mul", &shape, self.value(b).shape())?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..av.len()).map(|i| av[i] * bv[map.index(i)]).collect();
        let value = Tensor::new(shape, data)?;
        self.record("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.record("scale", value, Op::Scale { x, factor: f }, &[x])
    }

    /// Sum over an axis; `Channel` gives `[1, H, W]`, `Spatial` gives `[C, 1, 1]`,
    /// `All` gives a scalar.
    pub fn reduce_sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        let value = match axis {
            Axis::All => Tensor::scalar(xv.data().iter().copied().sum()),
            Axis::Channel => {
                let (c, h, w) = dims3("reduce_sum", xv)?;
                let mut out = vec![T::zero(); h * w];
                for ch in 0..c {
                    for (o, &v) in out.iter_mut().zip(&xv.data()[ch * h * w..(ch + 1) * h * w]) {
                        *o = *o + v;
                    }
                }
                Tensor::new(vec![1, h, w], out)?
            }
            Axis::Spatial => {
                let (c, h, w) = dims3("reduce_sum", xv)?;
                let out = xv.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                Tensor::new(vec![c, 1, 1], out)?
            }
        };
        self.record("reduce_sum", value, Op::ReduceSum { x, axis }, &[x])
    }

    /// Mean over disjoint `ratio x ratio` blocks.
    pub fn avg_pool(&mut self, x: Var, ratio: usize) -> Result<Var> {
        let (c, h, w) = dims3("avg_pool", self.value(x))?;
        if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
            return Err(Error::shape("avg_pool", format!("{}x{} not divisible by {}", h, w, ratio)));
        }
        let (oh, ow) = (h / ratio, w / ratio);
        let inv = T::one() / T::from_f64((ratio * ratio) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = (ch * oh + y / ratio) * ow + xx / ratio;
                    out[o] = out[o] + xv[(ch * h + y) * w + xx] * inv;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.record("avg_pool", value, Op::AvgPool { x, ratio }, &[x])
    }

    /// Divide each row (last axis) of a `[O, C]` matrix by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let group = *self.value(x).shape().last().unwrap_or(&0);
        self.normalize_groups(x, group)
    }

    /// Divide the whole tensor by its sum.
    pub fn normalize_all(&mut self, x: Var) -> Result<Var> {
        let group = self.value(x).len();
        self.normalize_groups(x, group)
    }

    fn normalize_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.len() % group != 0 {
            return Err(Error::shape("normalize", format!("group {} of {:?}", group, xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(group) {
            let s: T = chunk.iter().copied().sum();
            if !(s > T::zero()) {
                return Err(Error::Constraint("normalization over a group with non-positive sum".into()));
            }
            chunk.iter_mut().for_each(|v| *v = *v / s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("normalize", value, Op::NormalizeGroups { x, group }, &[x])
    }

    /// One `[r, r]` kernel applied to every channel with stride `r` (disjoint blocks).
    pub fn block_filter(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (c, h, w) = dims3("block_filter", self.value(x))?;
        let r = match self.value(kernel).shape()[..] {
            [a, b] if a == b && a > 0 => a,
            ref s => return Err(Error::shape("block_filter", format!("kernel {:?} is not square", s))),
        };
        if h % r != 0 || w % r != 0 {
            return Err(Error::shape("block_filter", format!("{}x{} not divisible by {}", h, w, r)));
        }
        let (oh, ow) = (h / r, w / r);
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let row = &xv[(ch * h + y) * w..(ch * h + y + 1) * w];
                let krow = &kv[(y % r) * r..(y % r + 1) * r];
                let orow = &mut out[(ch * oh + y / r) * ow..(ch * oh + y / r + 1) * ow];
                for (o, block) in orow.iter_mut().zip(row.chunks(r)) {
                    *o = *o + block.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.record("block_filter", value, Op::BlockFilter { x, kernel }, &[x, kernel])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.l1(a, b, None)
    }

    /// Mean absolute difference over the pixels selected by a `[1, H, W]`
    /// weight map (broadcast across channels).
    pub fn l1_loss_masked(&mut self, a: Var, b: Var, mask: Var) -> Result<Var> {
        self.l1(a, b, Some(mask))
    }

    fn l1(&mut self, a: Var, b: Var, mask: Option<Var>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let weights = PixelWeights::new("l1_loss", av, mask.map(|m| self.value(m)))?;
        let total: T = av
            .data()
            .iter()
            .zip(bv.data())
            .enumerate()
            .map(|(i, (&x, &y))| weights.at(i) * (x - y).abs())
            .sum();
        let value = Tensor::scalar(total * weights.inv_norm);
        self.record("l1_loss", value, Op::L1 { a, b, mask }, &[a, b])
    }

    /// `sum_n KL(eps || a_n)` with `a` clamped into `[KL_FLOOR, 1 - KL_FLOOR]`.
    pub fn kl_div(&mut self, eps: f64, a: Var) -> Result<Var> {
        self.kl(eps, a, None, false)
    }

    /// Mean of `KL(eps || a_n)` over masked pixels (all channels).
    pub fn kl_div_mean(&mut self, eps: f64, a: Var, mask: Option<Var>) -> Result<Var> {
        self.kl(eps, a, mask, true)
    }

    fn kl(&mut self, eps: f64, x: Var, mask: Option<Var>, mean: bool) -> Result<Var> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("sparsity target {} outside (0, 1)", eps)));
        }
        let xv = self.value(x);
        let weights = PixelWeights::new("kl_div", xv, mask.map(|m| self.value(m)))?;
        let target = T::from_f64(eps);
        let total: T = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| weights.at(i) * kl_term(target, v))
            .sum();
        let scale = if mean { weights.inv_norm } else { T::one() };
        let value = Tensor::scalar(total * scale);
        self.record("kl_div", value, Op::KlDiv { x, target, mask, mean }, &[x])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.requires_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            check_finite("backward", g.data())?;
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(self.ops[id], Op::Leaf) || !self.requires_grad[id] {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let out = &self.values[id];
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_h,
                out_w,
                cols,
            } => {
                let n = out_h * out_w;
                let o = out.shape()[0];
                let rows = geom.col_rows();
                if self.wants(*kernel) {
                    let shape = self.value(*kernel).shape().to_vec();
                    accumulate(&mut grads[kernel.0], &shape, |dk| {
                        T::gemm(o, n, rows, gd, false, cols, true, T::one(), dk)
                    });
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], &[o], |db| {
                            for (d, row) in db.iter_mut().zip(gd.chunks(n)) {
                                *d = *d + row.iter().copied().sum();
                            }
                        });
                    }
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * n];
                    T::gemm(rows, o, n, self.value(*kernel).data(), true, gd, false, T::zero(), &mut dcols);
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads[input.0], &shape, |dx| col2im(&dcols, geom, *out_h, *out_w, dx));
                }
            }
            Op::ChannelMatmul { weight, input } => {
                let (c, h, w) = self.value(*input).dims3().expect("checked in forward");
                let o = out.shape()[0];
                if self.wants(*weight) {
                    accumulate(&mut grads[weight.0], &[o, c], |dw| {
                        T::gemm(o, h * w, c, gd, false, self.value(*input).data(), true, T::one(), dw)
                    });
                }
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], &[c, h, w], |dx| {
                        T::gemm(c, o, h * w, self.value(*weight).data(), true, gd, false, T::one(), dx)
                    });
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv.data()).zip(gd) {
                        // subgradient at 0 is the slope
                        *d = *d + if v > T::zero() { gi } else { gi * *slope };
                    }
                });
            }
            Op::Clamp01 { x } => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv.data()).zip(gd) {
                        if v > T::zero() && v < T::one() {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for_each_group(out.shape(), *axis, |idx| {
                    let dot: T = idx.clone().map(|i| y[i] * gd[i]).sum();
                    for i in idx {
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                })?;
                add_into(&mut grads[x.0], out.shape(), &dx);
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    add_into(&mut grads[a.0], self.value(*a).shape(), &gd[..na]);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], self.value(*b).shape(), &gd[na..]);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let map = BroadcastMap::new("mul", av.shape(), bv.shape())?;
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d = *d + gd[i] * bv.data()[map.index(i)];
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        for (i, &gi) in gd.iter().enumerate() {
                            let j = map.index(i);
                            db[j] = db[j] + gi * av.data()[i];
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], out.shape(), gd);
                    }
                }
            }
            Op::Scale { x, factor } => {
                accumulate(&mut grads[x.0], out.shape(), |dx| {
                    for (d, &gi) in dx.iter_mut().zip(gd) {
                        *d = *d + gi * *factor;
                    }
                });
            }
            Op::ReduceSum { x, axis } => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                accumulate(&mut grads[x.0], &shape, |dx| match axis {
                    Axis::All => dx.iter_mut().for_each(|d| *d = *d + gd[0]),
                    Axis::Channel => {
                        let plane = gd.len();
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d = *d + gd[i % plane];
                        }
                    }
                    Axis::Spatial => {
                        let plane = shape[1] * shape[2];
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d = *d + gd[i / plane];
                        }
                    }
                });
            }
            Op::AvgPool { x, ratio } => {
                let (c, h, w) = self.value(*x).dims3().expect("checked in forward");
                let (oh, ow) = (h / ratio, w / ratio);
                let inv = T::one() / T::from_f64((ratio * ratio) as f64);
                accumulate(&mut grads[x.0], &[c, h, w], |dx| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let i = (ch * h + y) * w + xx;
                                dx[i] = dx[i] + gd[(ch * oh + y / ratio) * ow + xx / ratio] * inv;
                            }
                        }
                    }
                });
            }
            Op::NormalizeGroups { x, group } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for ((dchunk, xchunk), gchunk) in dx.chunks_mut(*group).zip(xv.data().chunks(*group)).zip(gd.chunks(*group)) {
                    let s: T = xchunk.iter().copied().sum();
                    let dot: T = gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum();
                    for (d, &gi) in dchunk.iter_mut().zip(gchunk) {
                        *d = gi / s - dot / (s * s);
                    }
                }
                add_into(&mut grads[x.0], xv.shape(), &dx);
            }
            Op::BlockFilter { x, kernel } => {
                let (c, h, w) = self.value(*x).dims3().expect("checked in forward");
                let r = self.value(*kernel).shape()[0];
                let (oh, ow) = (h / r, w / r);
                let (xv, kv) = (self.value(*x).data(), self.value(*kernel).data());
                if self.wants(*kernel) {
                    accumulate(&mut grads[kernel.0], &[r, r], |dk| {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let go = gd[(ch * oh + y / r) * ow + xx / r];
                                    let k = (y % r) * r + xx % r;
                                    dk[k] = dk[k] + go * xv[(ch * h + y) * w + xx];
                                }
                            }
                        }
                    });
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], &[c, h, w], |dx| {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let go = gd[(ch * oh + y / r) * ow + xx / r];
                                    let i = (ch * h + y) * w + xx;
                                    dx[i] = dx[i] + go * kv[(y % r) * r + xx % r];
                                }
                            }
                        }
                    });
                }
            }
            Op::L1 { a, b, mask } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let weights = PixelWeights::new("l1_loss", av, mask.map(|m| self.value(m)))?;
                let scale = gd[0] * weights.inv_norm;
                let sign = |i: usize| {
                    let d = av.data()[i] - bv.data()[i];
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d = *d + scale * weights.at(i) * sign(i);
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        for (i, d) in db.iter_mut().enumerate() {
                            *d = *d - scale * weights.at(i) * sign(i);
                        }
                    });
                }
            }
            Op::KlDiv { x, target, mask, mean } => {
                let xv = self.value(*x);
                let weights = PixelWeights::new("kl_div", xv, mask.map(|m| self.value(m)))?;
                let scale = if *mean { gd[0] * weights.inv_norm } else { gd[0] };
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d = *d + scale * weights.at(i) * kl_slope(*target, xv.data()[i]);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Element>(slot: &mut Option<Tensor<T>>, shape: &[usize], src: &[T]) {
    accumulate(slot, shape, |d| {
        for (a, &b) in d.iter_mut().zip(src) {
            *a = *a + b;
        }
    });
}

fn kl_floor<T: Element>() -> (T, T) {
    let f = T::from_f64(KL_FLOOR);
    (f, T::one() - f)
}

fn kl_term<T: Element>(eps: T, a: T) -> T {
    let (lo, hi) = kl_floor::<T>();
    let a = a.max(lo).min(hi);
    let one = T::one();
    eps * (eps / a).ln() + (one - eps) * ((one - eps) / (one - a)).ln()
}

fn kl_slope<T: Element>(eps: T, a: T) -> T {
    let (lo, hi) = kl_floor::<T>();
    if a <= lo || a >= hi {
        return T::zero();
    }
    let one = T::one();
    -eps / a + (one - eps) / (one - a)
}

/// Calls `f` once per normalization group with the flat indices of the group.
fn for_each_group(
    shape: &[usize],
    axis: Axis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) -> Result<()> {
    let n: usize = shape.iter().product();
    match axis {
        Axis::All => f((0..n).step_by(1)),
        Axis::Channel | Axis::Spatial => {
            let [c, h, w] = shape[..] else {
                return Err(Error::shape("softmax", format!("expected [C, H, W], got {:?}", shape)));
            };
            let plane = h * w;
            if axis == Axis::Channel {
                for p in 0..plane {
                    f((p..p + c * plane).step_by(plane));
                }
            } else {
                for ch in 0..c {
                    f((ch * plane..(ch + 1) * plane).step_by(1));
                }
            }
        }
    }
    Ok(())
}

/// Maps a flat index of the full shape to the flat index of a broadcast operand.
struct BroadcastMap {
    full: Vec<usize>,
    strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(op: &'static str, full: &[usize], part: &[usize]) -> Result<Self> {
        if full.len() != part.len() || full.iter().zip(part).any(|(&f, &p)| p != f && p != 1) {
            return Err(Error::shape(op, format!("cannot broadcast {:?} to {:?}", part, full)));
        }
        let mut strides = vec![0; part.len()];
        let mut acc = 1;
        for d in (0..part.len()).rev() {
            strides[d] = if part[d] == 1 { 0 } else { acc };
            acc *= part[d];
        }
        Ok(Self {
            full: full.to_vec(),
            strides,
        })
    }

    fn index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in (0..self.full.len()).rev() {
            out += (flat % self.full[d]) * self.strides[d];
            flat /= self.full[d];
        }
        out
    }
}

/// Optional per-pixel weights broadcast over channels, with the reciprocal of
/// the total weight (times channel count) used for mean reduction.
struct PixelWeights<'a, T> {
    mask: Option<&'a [T]>,
    plane: usize,
    inv_norm: T,
}

impl<'a, T: Element> PixelWeights<'a, T> {
    fn new(op: &'static str, x: &Tensor<T>, mask: Option<&'a Tensor<T>>) -> Result<Self> {
        match mask {
            None => {
                if x.is_empty() {
                    return Err(Error::shape(op, "empty input"));
                }
                Ok(Self {
                    mask: None,
                    plane: 1,
                    inv_norm: T::one() / T::from_f64(x.len() as f64),
                })
            }
            Some(m) => {
                let (c, h, w) = dims3(op, x)?;
                if m.shape() != [1, h, w] {
                    return Err(Error::shape(op, format!("mask {:?} for {:?}", m.shape(), x.shape())));
                }
                let total: T = m.data().iter().copied().sum();
                if !(total > T::zero()) {
                    return Err(Error::invalid(format!("{}: mask selects no pixels", op)));
                }
                Ok(Self {
                    mask: Some(m.data()),
                    plane: h * w,
                    inv_norm: T::one() / (total * T::from_f64(c as f64)),
                })
            }
        }
    }

    #[inline]
    fn at(&self, i: usize) -> T {
        match self.mask {
            None => T::one(),
            Some(m) => m[i % self.plane],
        }
    }
}
