//! Reverse-mode tape.
//!
//! Every op evaluates eagerly, appends a node holding its value plus whatever
//! it needs for the adjoint, and returns a [`Var`] handle. [`Graph::backward`]
//! walks the tape in reverse. Nodes that do not depend on any gradient-tracking
//! leaf are skipped, so frozen sub-networks only pay for input gradients.

use crate::error::{Result, TensorError};
use crate::kernels::{col2im, im2col, ConvGeom};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormFrozen { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    OneMinus { x: Var },
    Scale { x: Var, c: T },
    Narrow { x: Var, start: usize },
    Concat { parts: Vec<Var> },
    BroadcastSpatial { x: Var },
    Reshape { x: Var },
    Upsample2x { x: Var },
    InstanceStandardize { x: Var, inv_d: Vec<T>, sigma: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    GlobalAvgPool { x: Var },
    MeanSqDiff { x: Var, target: T },
    MaskedL1 { a: Var, b: Var, mask: Vec<T> },
    Select { x: Var, indices: Vec<usize> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of eagerly evaluated nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}

/// Splits a shape into `(n, c, inner)` for channel-axis ops.
fn split_axis1(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("need rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Gradient-tracking input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return Err(shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(shape_err("conv2d: bias length must equal output channels"));
            }
        }
        let geom = ConvGeom { in_channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * co * ho * wo];
        let mut col = vec![T::zero(); rows * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
                gemm(co, rows, cols, wv, false, &col, false, &mut out[i * co * cols..(i + 1) * co * cols], false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for (o, &bo) in bv.iter().enumerate() {
                        let base = (i * co + o) * cols;
                        for v in &mut out[base..base + cols] {
                            *v += bo;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let t = Tensor::new(&[n, co, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// `y = x W^T + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, fin2) = self.value(w).dims2()?;
        if fin != fin2 {
            return Err(shape_err(format!("linear: input width {fin} vs weight {fin2}")));
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(shape_err("linear: bias length mismatch"));
            }
            for row in out.chunks_mut(fout) {
                for (o, &bo) in row.iter_mut().zip(bv) {
                    *o += bo;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let t = Tensor::new(&[n, fout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = split_axis1(self.value(x).shape())?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch norm: affine length must equal channels"));
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch normalization over all axes except the channel axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.check_bn(x, gamma, beta)?;
        let count = n * inner;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_count = T::one() / T::lit(count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                s += xv[base..base + inner].iter().copied().sum();
            }
            let m = s * inv_count;
            let mut q = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                q += xv[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum();
            }
            mean[ch] = m;
            var[ch] = q * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, inner);
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(self.value(x).shape(), out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, inner) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch norm: running statistics length mismatch"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, inner);
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::BatchNormFrozen { x, gamma, beta, xhat, inv_std }, rg))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        inner: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        (xhat, out)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(t, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu { x, slope: s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() - v, Op::OneMinus { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, move |v| v * c, Op::Scale { x, c })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul { a, b })
    }

    /// Sums any number of same-shape vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| shape_err("add_all: no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Slice `len` entries along axis 1 starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, inner) = split_axis1(&shape)?;
        if start + len > c {
            return Err(shape_err(format!("narrow: {start}+{len} exceeds {c} channels")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            out.extend_from_slice(&xv[(i * c + start) * inner..(i * c + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let t = Tensor::new(&oshape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Narrow { x, start }, rg))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat: no inputs"))?;
        let shape0 = self.value(first).shape().to_vec();
        let (n, _, inner) = split_axis1(&shape0)?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != shape0.len() || s[0] != n || s[2..] != shape0[2..] {
                return Err(shape_err(format!("concat: {s:?} incompatible with {shape0:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(n * total * inner);
        for i in 0..n {
            for &p in parts {
                let c = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut oshape = shape0;
        oshape[1] = total;
        let t = Tensor::new(&oshape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// `(N, C) -> (N, C, H, W)` by replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat(v).take(hw));
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::BroadcastSpatial { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * w2..(y + 1) * w2];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Upsample2x { x }, rg))
    }

    /// Per-(sample, channel) standardization over spatial positions:
    /// `(x - mu) / (sigma + eps)` with population sigma.
    pub fn instance_standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, inner) = split_axis1(&shape)?;
        if inner == 0 {
            return Err(shape_err("instance_standardize: empty spatial extent"));
        }
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_d = vec![T::zero(); n * c];
        let mut sigma = vec![T::zero(); n * c];
        let inv_m = T::one() / T::lit(inner as f64);
        for p in 0..n * c {
            let s = &xv[p * inner..(p + 1) * inner];
            let mu = s.iter().copied().sum::<T>() * inv_m;
            let var = s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
            let sd = var.sqrt();
            let id = T::one() / (sd + eps);
            for (o, &v) in out[p * inner..(p + 1) * inner].iter_mut().zip(s) {
                *o = (v - mu) * id;
            }
            inv_d[p] = id;
            sigma[p] = sd;
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::InstanceStandardize { x, inv_d, sigma }, rg))
    }

    /// `y[n,c,..] = scale[n,c] * x[n,c,..] + shift[n,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, inner) = split_axis1(&shape)?;
        if self.value(scale).shape() != [n, c] || self.value(shift).shape() != [n, c] {
            return Err(shape_err(format!(
                "channel_affine: scale/shift must be [{n}, {c}], got {:?} / {:?}",
                self.value(scale).shape(),
                self.value(shift).shape()
            )));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let tv = self.value(shift).data();
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..n * c {
            for (o, &v) in out[p * inner..(p + 1) * inner].iter_mut().zip(&xv[p * inner..(p + 1) * inner]) {
                *o = sv[p] * v + tv[p];
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(t, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// `(N, C, ..) -> (N, C)` mean over trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, inner) = split_axis1(self.value(x).shape())?;
        let inv = T::one() / T::lit(inner as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|s| s.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, rg))
    }

    /// Scalar `mean((x - target)^2)`.
    pub fn mean_sq_diff(&mut self, x: Var, target: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(shape_err("mean_sq_diff: empty input"));
        }
        let tg = T::lit(target);
        let s: T = xv.data().iter().map(|&v| (v - tg) * (v - tg)).sum();
        let val = s / T::lit(xv.numel() as f64);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(val), Op::MeanSqDiff { x, target: tg }, rg))
    }

    /// Scalar `mean(|a - b| * mask)`, averaged over all elements.
    pub fn masked_l1(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        av.expect_same_shape(mask)?;
        if av.numel() == 0 {
            return Err(shape_err("masked_l1: empty input"));
        }
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(mask.data())
            .map(|((&p, &q), &m)| (p - q).abs() * m)
            .sum();
        let val = s / T::lit(av.numel() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(val), Op::MaskedL1 { a, b, mask: mask.data().to_vec() }, rg))
    }

    /// Gathers flat elements of `x` into a 1-d tensor.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*xv.get(i).ok_or_else(|| shape_err(format!("select: index {i} out of range")))?);
        }
        let t = Tensor::new(&[indices.len()], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Select { x, indices: indices.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // only leaf gradients are kept
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => {
                *slot = Some(t);
                Ok(())
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, c, h, wd) = xt.dims4()?;
                let (co, _, k, _) = wt.dims4()?;
                let geom = ConvGeom { in_channels: c, height: h, width: wd, kernel: k, stride: *stride, pad: *pad };
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut col = vec![T::zero(); rows * cols];
                let mut dw = if want_w { vec![T::zero(); wt.numel()] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); xt.numel()] } else { Vec::new() };
                for i in 0..n {
                    let go = &gd[i * co * cols..(i + 1) * co * cols];
                    if want_w {
                        im2col(&xt.data()[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
                        gemm(co, cols, rows, go, false, &col, true, &mut dw, true);
                    }
                    if want_x {
                        gemm(rows, co, cols, wt.data(), true, go, false, &mut col, false);
                        col2im(&col, &geom, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                if want_w {
                    self.accum(grads, *w, Tensor::new(wt.shape(), dw)?)?;
                }
                if want_x {
                    self.accum(grads, *x, Tensor::new(xt.shape(), dx)?)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); co];
                        for i in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (i * co + o) * cols;
                                *d += gd[base..base + cols].iter().copied().sum();
                            }
                        }
                        self.accum(grads, *b, Tensor::new(&[co], db)?)?;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, fin) = xt.dims2()?;
                let (fout, _) = wt.dims2()?;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, gd, false, wt.data(), false, &mut dx, false);
                    self.accum(grads, *x, Tensor::new(&[n, fin], dx)?)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, gd, true, xt.data(), false, &mut dw, false);
                    self.accum(grads, *w, Tensor::new(&[fout, fin], dw)?)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accum(grads, *b, Tensor::new(&[fout], db)?)?;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, inner) = split_axis1(self.value(*x).shape())?;
                let gv = self.value(*gamma).data();
                let m = T::lit((n * inner) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.wants(*x) {
                    // dx = gamma*inv_std/M * (M*g - sum(g) - xhat*sum(g*xhat))
                    let mut dx = vec![T::zero(); gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / m;
                            let base = (i * c + ch) * inner;
                            for j in base..base + inner {
                                dx[j] = k * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::new(self.value(*x).shape(), dx)?)?;
                }
                if self.wants(*gamma) {
                    self.accum(grads, *gamma, Tensor::new(&[c], dgamma)?)?;
                }
                if self.wants(*beta) {
                    self.accum(grads, *beta, Tensor::new(&[c], dbeta)?)?;
                }
            }
            Op::BatchNormFrozen { x, gamma, beta, xhat, inv_std } => {
                let (n, c, inner) = split_axis1(self.value(*x).shape())?;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        let k = gv[ch] * inv_std[ch];
                        for j in base..base + inner {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                            dx[j] = gd[j] * k;
                        }
                    }
                }
                if self.wants(*x) {
                    self.accum(grads, *x, Tensor::new(self.value(*x).shape(), dx)?)?;
                }
                if self.wants(*gamma) {
                    self.accum(grads, *gamma, Tensor::new(&[c], dgamma)?)?;
                }
                if self.wants(*beta) {
                    self.accum(grads, *beta, Tensor::new(&[c], dbeta)?)?;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }).collect();
                self.accum(grads, *x, Tensor::new(g.shape(), d)?)?;
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accum(grads, *x, Tensor::new(g.shape(), d)?)?;
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                self.accum(grads, *x, Tensor::new(g.shape(), d)?)?;
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.clone())?;
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(&g, &q)| g * q).collect();
                    self.accum(grads, *a, Tensor::new(g.shape(), d)?)?;
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(&g, &p)| g * p).collect();
                    self.accum(grads, *b, Tensor::new(g.shape(), d)?)?;
                }
            }
            Op::OneMinus { x } => self.accum(grads, *x, g.map(|v| -v))?,
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(grads, *x, g.map(move |v| v * c))?
            }
            Op::Narrow { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c, inner) = split_axis1(&shape)?;
                let len = g.shape()[1];
                let mut d = vec![T::zero(); n * c * inner];
                for i in 0..n {
                    d[(i * c + start) * inner..(i * c + start + len) * inner]
                        .copy_from_slice(&gd[i * len * inner..(i + 1) * len * inner]);
                }
                self.accum(grads, *x, Tensor::new(&shape, d)?)?;
            }
            Op::Concat { parts } => {
                let (n, total, inner) = split_axis1(g.shape())?;
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let c = shape[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for i in 0..n {
                            d.extend_from_slice(&gd[(i * total + offset) * inner..(i * total + offset + c) * inner]);
                        }
                        self.accum(grads, p, Tensor::new(&shape, d)?)?;
                    }
                    offset += c;
                }
            }
            Op::BroadcastSpatial { x } => {
                let shape = self.value(*x).shape().to_vec();
                let (_, _, h, w) = g.dims4()?;
                let d = gd.chunks(h * w).map(|s| s.iter().copied().sum()).collect();
                self.accum(grads, *x, Tensor::new(&shape, d)?)?;
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.clone().reshape(&shape)?)?;
            }
            Op::Upsample2x { x } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c, h, w) = self.value(*x).dims4()?;
                let w2 = 2 * w;
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y2 in 0..2 * h {
                        let row = &src[y2 * w2..(y2 + 1) * w2];
                        let drow = &mut dst[(y2 / 2) * w..(y2 / 2 + 1) * w];
                        for (x2, &v) in row.iter().enumerate() {
                            drow[x2 / 2] += v;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(&shape, d)?)?;
            }
            Op::InstanceStandardize { x, inv_d, sigma } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c, inner) = split_axis1(&shape)?;
                let y = node.value.data();
                let m = T::lit(inner as f64);
                let mut d = vec![T::zero(); gd.len()];
                for p in 0..n * c {
                    let gs = &gd[p * inner..(p + 1) * inner];
                    let ys = &y[p * inner..(p + 1) * inner];
                    let gmean = gs.iter().copied().sum::<T>() / m;
                    // xc = y * d, so sum(g*xc)/d^2 * xc_j/(M*sigma) = sum(g*y) * y_j / (M*sigma*inv_d)
                    let coupling = if sigma[p] > T::zero() {
                        let gy: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                        gy / (m * sigma[p] * inv_d[p])
                    } else {
                        T::zero()
                    };
                    for j in 0..inner {
                        d[p * inner + j] = (gs[j] - gmean) * inv_d[p] - coupling * ys[j] * inv_d[p];
                    }
                }
                self.accum(grads, *x, Tensor::new(&shape, d)?)?;
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c, inner) = split_axis1(&shape)?;
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                if self.wants(*x) {
                    let mut d = vec![T::zero(); gd.len()];
                    for p in 0..n * c {
                        for j in p * inner..(p + 1) * inner {
                            d[j] = gd[j] * sv[p];
                        }
                    }
                    self.accum(grads, *x, Tensor::new(&shape, d)?)?;
                }
                if self.wants(*scale) {
                    let d = (0..n * c)
                        .map(|p| (p * inner..(p + 1) * inner).map(|j| gd[j] * xv[j]).sum())
                        .collect();
                    self.accum(grads, *scale, Tensor::new(&[n, c], d)?)?;
                }
                if self.wants(*shift) {
                    let d = gd.chunks(inner).map(|s| s.iter().copied().sum()).collect();
                    self.accum(grads, *shift, Tensor::new(&[n, c], d)?)?;
                }
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape().to_vec();
                let (_, _, inner) = split_axis1(&shape)?;
                let inv = T::one() / T::lit(inner as f64);
                let mut d = Vec::with_capacity(inner * gd.len());
                for &v in gd {
                    d.extend(std::iter::repeat(v * inv).take(inner));
                }
                self.accum(grads, *x, Tensor::new(&shape, d)?)?;
            }
            Op::MeanSqDiff { x, target } => {
                let xt = self.value(*x);
                let k = gd[0] * T::lit(2.0) / T::lit(xt.numel() as f64);
                let t = *target;
                self.accum(grads, *x, xt.map(|v| (v - t) * k))?;
            }
            Op::MaskedL1 { a, b, mask } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let k = gd[0] / T::lit(at.numel() as f64);
                let da: Vec<T> = at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .zip(mask)
                    .map(|((&p, &q), &m)| {
                        let diff = p - q;
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * m * k
                    })
                    .collect();
                if self.wants(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accum(grads, *b, Tensor::new(bt.shape(), db)?)?;
                }
                if self.wants(*a) {
                    self.accum(grads, *a, Tensor::new(at.shape(), da)?)?;
                }
            }
            Op::Select { x, indices } => {
                let xt = self.value(*x);
                let mut d = vec![T::zero(); xt.numel()];
                for (&i, &v) in indices.iter().zip(gd) {
                    d[i] += v;
                }
                self.accum(grads, *x, Tensor::new(xt.shape(), d)?)?;
            }
            Op::Sum { x } => {
                let xt = self.value(*x);
                self.accum(grads, *x, Tensor::full(xt.shape(), gd[0]))?;
            }
        }
        Ok(())
    }
}
