//! Minimal CPU layers with explicit forward/backward passes.
//!
//! Tensors are dense `N x C x H x W` arrays of `f64`. Layers cache what they
//! need during [`Mode`]-aware forward passes and accumulate parameter
//! gradients on backward. Inference goes through `eval`, which takes `&self`
//! and never touches caches or running statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values for shape {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.c * self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.c * self.h * self.w;
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of channels `[from, from + count)` for every batch item.
    pub fn channels(&self, from: usize, count: usize) -> Tensor {
        let hw = self.h * self.w;
        let mut out = Tensor::zeros(self.n, count, self.h, self.w);
        for n in 0..self.n {
            let src = &self.item(n)[from * hw..(from + count) * hw];
            out.item_mut(n).copy_from_slice(src);
        }
        out
    }

    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, h, w) = (first.n, first.h, first.w);
        if parts.iter().any(|p| p.n != n || p.h != h || p.w != w) {
            return Err(Error::Shape("concat inputs differ in batch or spatial size".into()));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor::zeros(n, c, h, w);
        for b in 0..n {
            let mut off = 0;
            let dst = out.item_mut(b);
            for p in parts {
                let src = p.item(b);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A learnable array, or a non-trainable buffer such as batch-norm running
/// statistics.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>, trainable: bool) -> Self {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Self {
            value,
            grad: vec![0.0; len],
            velocity: vec![0.0; len],
            shape: shape.to_vec(),
            trainable,
        }
    }

    pub fn filled(shape: &[usize], v: f64, trainable: bool) -> Self {
        Self::new(shape, vec![v; shape.iter().product()], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Walks named parameters; used by the optimizer and the checkpoint store.
pub trait Visit {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

/// SGD with momentum and L2 weight decay on every trainable parameter:
/// `v = m * v + lr * (g + wd * w); w -= v`. Gradients are cleared.
pub fn sgd_step(model: &mut dyn Visit, lr: f64, momentum: f64, weight_decay: f64) {
    model.visit("", &mut |_, p| {
        if p.trainable {
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(p.velocity.iter_mut()) {
                *v = momentum * *v + lr * (g + weight_decay * *w);
                *w -= *v;
            }
        }
        p.zero_grad();
    });
}

/// Clears all accumulated gradients.
pub fn zero_grads(model: &mut dyn Visit) {
    model.visit("", &mut |_, p| p.zero_grad());
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics, still differentiable.
    Frozen,
}

/// Row-major GEMM `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is
/// `k x n`; the `*_t` flags read the stored operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// MSRA (He) normal initialization with fan-in scaling.
pub fn msra_init<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

struct ConvCache {
    in_shape: [usize; 4],
    cols: Vec<Vec<f64>>,
}

pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<ConvCache>,
}

impl Conv2d {
    /// Zero weights and bias.
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::filled(&[out_c, in_c, k, k], 0.0, true),
            bias: Param::filled(&[out_c], 0.0, true),
            cache: None,
        }
    }

    pub fn msra<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut conv = Self::zeros(in_c, out_c, k, stride, pad);
        conv.weight.value = msra_init(rng, in_c * k * k, out_c * in_c * k * k);
        conv
    }

    /// Same-padded stride-1 convolution.
    pub fn same<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, k: usize) -> Self {
        Self::msra(rng, in_c, out_c, k, 1, k / 2)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.k, self.stride, self.pad),
            conv_out_size(w, self.k, self.stride, self.pad),
        )
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        if x.c != self.in_c {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_c, x.c
            )));
        }
        if x.h + 2 * self.pad < self.k || x.w + 2 * self.pad < self.k {
            return Err(Error::Shape(format!(
                "{}x{} input too small for kernel {}",
                x.h, x.w, self.k
            )));
        }
        let (oh, ow) = self.output_size(x.h, x.w);
        let ohw = oh * ow;
        let ckk = self.in_c * self.k * self.k;
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut all_cols = Vec::with_capacity(x.n);
        for n in 0..x.n {
            let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
                x.item(n).to_vec()
            } else {
                im2col(x.item(n), x.c, x.h, x.w, self.k, self.stride, self.pad, oh, ow)
            };
            let out = y.item_mut(n);
            for (o, b) in self.bias.value.iter().enumerate() {
                out[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = *b);
            }
            gemm(self.out_c, ckk, ohw, &self.weight.value, false, &cols, false, 1.0, out);
            all_cols.push(cols);
        }
        Ok((y, all_cols))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, cols) = self.run(x)?;
        self.cache = Some(ConvCache {
            in_shape: x.shape(),
            cols,
        });
        Ok(y)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("conv backward without forward".into()))?;
        let [n, c, h, w] = cache.in_shape;
        let (oh, ow) = (dy.h, dy.w);
        let ohw = oh * ow;
        let ckk = c * self.k * self.k;
        let mut dx = Tensor::zeros(n, c, h, w);
        let mut dcols = vec![0.0; ckk * ohw];
        for b in 0..n {
            let g = dy.item(b);
            for o in 0..self.out_c {
                self.bias.grad[o] += g[o * ohw..(o + 1) * ohw].iter().sum::<f64>();
            }
            gemm(self.out_c, ohw, ckk, g, false, &cache.cols[b], true, 1.0, &mut self.weight.grad);
            gemm(ckk, self.out_c, ohw, &self.weight.value, true, g, false, 0.0, &mut dcols);
            if self.k == 1 && self.stride == 1 && self.pad == 0 {
                dx.item_mut(b).copy_from_slice(&dcols);
            } else {
                col2im(&dcols, dx.item_mut(b), c, h, w, self.k, self.stride, self.pad, oh, ow);
            }
        }
        Ok(dx)
    }
}

impl Visit for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0, true),
            beta: Param::filled(&[channels], 0.0, true),
            running_mean: Param::filled(&[channels], 0.0, false),
            running_var: Param::filled(&[channels], 1.0, false),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn batch_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let hw = x.h * x.w;
        let count = (x.n * hw) as f64;
        let mut mean = vec![0.0; x.c];
        let mut var = vec![0.0; x.c];
        for c in 0..x.c {
            let mut s = 0.0;
            for n in 0..x.n {
                s += x.item(n)[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for n in 0..x.n {
                v += x.item(n)[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|a| (a - m) * (a - m))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / count;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], var: &[f64]) -> (Tensor, Tensor, Vec<f64>) {
        let hw = x.h * x.w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.zeros_like();
        let mut y = x.zeros_like();
        for n in 0..x.n {
            for c in 0..x.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                let off = (n * x.c + c) * hw;
                for i in off..off + hw {
                    let xh = (x.data[i] - mean[c]) * inv_std[c];
                    x_hat.data[i] = xh;
                    y.data[i] = g * xh + b;
                }
            }
        }
        (y, x_hat, inv_std)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                let count = (x.n * x.h * x.w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                for c in 0..x.c {
                    self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean[c];
                    self.running_var.value[c] =
                        (1.0 - m) * self.running_var.value[c] + m * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Frozen => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let (y, x_hat, inv_std) = self.normalize(x, &mean, &var);
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            mode,
        });
        y
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        self.normalize(x, &self.running_mean.value, &self.running_var.value)
            .0
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batch-norm backward without forward".into()))?;
        let hw = dy.h * dy.w;
        let count = (dy.n * hw) as f64;
        let mut dx = dy.zeros_like();
        for c in 0..dy.c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for n in 0..dy.n {
                let off = (n * dy.c + c) * hw;
                for i in off..off + hw {
                    sum_dy += dy.data[i];
                    sum_dy_xh += dy.data[i] * cache.x_hat.data[i];
                }
            }
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            for n in 0..dy.n {
                let off = (n * dy.c + c) * hw;
                for i in off..off + hw {
                    dx.data[i] = match cache.mode {
                        Mode::Frozen => scale * dy.data[i],
                        Mode::Train => {
                            scale / count
                                * (count * dy.data[i] - sum_dy - cache.x_hat.data[i] * sum_dy_xh)
                        }
                    };
                }
            }
        }
        Ok(dx)
    }
}

impl Visit for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, v) in dx.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Convolution, batch normalization and ReLU.
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    out: Option<Tensor>,
}

impl Cbr {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_padding(rng, in_c, out_c, k, stride, k / 2)
    }

    pub fn with_padding<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::config("kernel", format!("CBR kernel must be 1 or 3, got {k}")));
        }
        Ok(Self {
            conv: Conv2d::msra(rng, in_c, out_c, k, stride, pad),
            bn: BatchNorm2d::new(out_c),
            out: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let z = self.conv.forward(x)?;
        let y = relu(&self.bn.forward(&z, mode));
        self.out = Some(y.clone());
        Ok(y)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&self.bn.eval(&self.conv.eval(x)?)))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let y = self
            .out
            .take()
            .ok_or_else(|| Error::Shape("CBR backward without forward".into()))?;
        let dz = self.bn.backward(&relu_backward(&y, dy))?;
        self.conv.backward(&dz)
    }
}

impl Visit for Cbr {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Source taps for one axis of half-pixel bilinear resizing.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with corner alignment disabled.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let ty = resize_taps(x.h, oh);
    let tx = resize_taps(x.w, ow);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (1.0 - lx) + src[y0 * x.w + x1] * lx;
                let bot = src[y1 * x.w + x0] * (1.0 - lx) + src[y1 * x.w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(dy: &Tensor, ih: usize, iw: usize) -> Tensor {
    let ty = resize_taps(ih, dy.h);
    let tx = resize_taps(iw, dy.w);
    let mut dx = Tensor::zeros(dy.n, dy.c, ih, iw);
    for nc in 0..dy.n * dy.c {
        let g = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * ih * iw..(nc + 1) * ih * iw];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * dy.w + ox];
                dst[y0 * iw + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * iw + x1] += v * (1.0 - ly) * lx;
                dst[y1 * iw + x0] += v * ly * (1.0 - lx);
                dst[y1 * iw + x1] += v * ly * lx;
            }
        }
    }
    dx
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct nested-loop convolution used as a reference.
    pub(crate) fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (oh, ow) = conv.output_size(x.h, x.w);
        let mut y = Tensor::zeros(x.n, conv.out_c, oh, ow);
        for n in 0..x.n {
            for o in 0..conv.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = conv.bias.value[o];
                        for c in 0..x.c {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((o * conv.in_c + c) * conv.k + ky) * conv.k + kx;
                                    s += conv.weight.value[wi] * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = y.index(n, o, oy, ox);
                        y.data[i] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 3, 0)] {
            let mut conv = Conv2d::msra(&mut rng, 3, 5, k, stride, pad);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            let x = random_tensor(&mut rng, 2, 3, 7, 6);
            let fast = conv.eval(&x).unwrap();
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    /// Scalar objective `sum(y * probe)` and its gradient, checked by central
    /// differences on input and weights.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::msra(&mut rng, 2, 3, 3, 2, 1);
        let x = random_tensor(&mut rng, 2, 2, 5, 5);
        let y = conv.forward(&x).unwrap();
        let probe = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        let dx = conv.backward(&probe).unwrap();
        let objective = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.eval(x).unwrap().data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6, "dx[{i}] {num} vs {}", dx.data[i]);
        }
        for i in 0..conv.weight.value.len() {
            let mut cp = Conv2d::zeros(2, 3, 3, 2, 1);
            cp.weight.value = conv.weight.value.clone();
            cp.weight.value[i] += eps;
            let fp = objective(&cp, &x);
            cp.weight.value[i] -= 2.0 * eps;
            let fm = objective(&cp, &x);
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - conv.weight.grad[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.5, 0.7];
        bn.beta.value = vec![0.1, -0.3];
        let x = random_tensor(&mut rng, 3, 2, 2, 2);
        let y = bn.forward(&x, Mode::Train);
        let probe = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        let dx = bn.backward(&probe).unwrap();
        let objective = |x: &Tensor| -> f64 {
            let mut b = BatchNorm2d::new(2);
            b.gamma.value = vec![1.5, 0.7];
            b.beta.value = vec![0.1, -0.3];
            b.forward(x, Mode::Train)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, p)| a * p)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (objective(&xp) - objective(&xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(ih, oh) in &[(3usize, 6usize), (1, 1), (2, 3), (4, 8)] {
            let x = random_tensor(&mut rng, 1, 2, ih, ih);
            let g = random_tensor(&mut rng, 1, 2, oh, oh);
            let y = resize_bilinear(&x, oh, oh);
            let dx = resize_bilinear_backward(&g, ih, ih);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn cbr_rejects_bad_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Cbr::new(&mut rng, 3, 4, 5, 1).is_err());
    }
}
