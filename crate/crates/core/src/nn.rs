//! Minimal layer library with explicit forward caches and backward passes.
//!
//! Activations are `(batch, features)` matrices whose rows hold one sample
//! flattened channel-major according to a [`Shape3`]. Parameters are flat
//! `f64` buffers so that optimizers, checkpoints and finite-difference
//! checks can treat every layer uniformly.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::Shape3;
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.value).expect("2-d param")
    }

    fn grad_matrix(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.grad).expect("2-d param")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Param::zeros(vec![input, output]),
            bias: Param::zeros(vec![output]),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = (0..input * output).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Param::new(vec![input, output], w),
            bias: Param::zeros(vec![output]),
        }
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` for weights and bias, the usual
    /// default for classifier heads.
    pub fn uniform<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid bound");
        let w = (0..input * output).map(|_| u.sample(rng)).collect();
        let b = (0..output).map(|_| u.sample(rng)).collect();
        Linear {
            weight: Param::new(vec![input, output], w),
            bias: Param::new(vec![output], b),
        }
    }

    pub fn input_len(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_len(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.matrix());
        let b = ArrayView2::from_shape((1, self.bias.len()), &self.bias.value).expect("bias row");
        y += &b;
        y
    }

    /// Accumulate parameter gradients (unless `frozen`) and return `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>, frozen: bool) -> Array2<f64> {
        if !frozen {
            let dw = x.t().dot(dy);
            self.weight.grad_matrix().zip_mut_with(&dw, |g, d| *g += d);
            for (g, d) in self.bias.grad.iter_mut().zip(dy.sum_axis(Axis(0))) {
                *g += d;
            }
        }
        dy.dot(&self.weight.matrix().t())
    }
}

/// 3x3 convolution with padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out_channels x (in_channels * 9)`
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub input: Shape3,
}

const K: usize = 3;
const PAD: usize = 1;

impl Conv2d {
    pub fn he<R: Rng>(input: Shape3, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = input.channels * K * K;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Conv2d {
            weight: Param::new(vec![out_channels, fan_in], w),
            bias: Param::zeros(vec![out_channels]),
            stride,
            input,
        }
    }

    /// Stride-1 convolution whose centre tap is the identity on every channel.
    pub fn identity(input: Shape3) -> Self {
        let c = input.channels;
        let mut w = vec![0.0; c * c * K * K];
        for ch in 0..c {
            w[ch * c * K * K + ch * K * K + K * K / 2] = 1.0;
        }
        Conv2d {
            weight: Param::new(vec![c, c * K * K], w),
            bias: Param::zeros(vec![c]),
            stride: 1,
            input,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_shape(&self) -> Shape3 {
        let o = |n: usize| (n + 2 * PAD - K) / self.stride + 1;
        Shape3::new(self.out_channels(), o(self.input.height), o(self.input.width))
    }

    /// `(batch * out_h * out_w, in_c * 9)` patch matrix.
    fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let Shape3 { channels: c, height: h, width: w } = self.input;
        let out = self.output_shape();
        let b = x.nrows();
        let mut cols = Array2::zeros((b * out.spatial(), c * K * K));
        for n in 0..b {
            let xs = x.row(n);
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let r = n * out.spatial() + oy * out.width + ox;
                    let mut row = cols.row_mut(r);
                    for ch in 0..c {
                        for ky in 0..K {
                            let iy = (oy * self.stride + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..K {
                                let ix = (ox * self.stride + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                row[ch * K * K + ky * K + kx] =
                                    xs[ch * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, batch: usize) -> Array2<f64> {
        let Shape3 { channels: c, height: h, width: w } = self.input;
        let out = self.output_shape();
        let mut dx = Array2::zeros((batch, self.input.len()));
        for n in 0..batch {
            let mut dxs = dx.row_mut(n);
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let row = dcols.row(n * out.spatial() + oy * out.width + ox);
                    for ch in 0..c {
                        for ky in 0..K {
                            let iy = (oy * self.stride + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..K {
                                let ix = (ox * self.stride + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[ch * h * w + iy as usize * w + ix as usize] +=
                                    row[ch * K * K + ky * K + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let cols = self.im2col(x);
        let out = self.output_shape();
        let mut yc = cols.dot(&self.weight.matrix().t());
        let b = ArrayView2::from_shape((1, self.bias.len()), &self.bias.value).expect("bias row");
        yc += &b;
        // (batch * spatial, out_c) -> (batch, out_c * spatial)
        let batch = x.nrows();
        let mut y = Array2::zeros((batch, out.len()));
        for n in 0..batch {
            let block = yc.slice(s![n * out.spatial()..(n + 1) * out.spatial(), ..]);
            let mut dst = y.row_mut(n);
            for (p, r) in block.rows().into_iter().enumerate() {
                for (oc, &v) in r.iter().enumerate() {
                    dst[oc * out.spatial() + p] = v;
                }
            }
        }
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Array2<f64>, dy: &Array2<f64>, frozen: bool) -> Array2<f64> {
        let out = self.output_shape();
        let batch = dy.nrows();
        let mut dyc = Array2::zeros((batch * out.spatial(), out.channels));
        for n in 0..batch {
            let src = dy.row(n);
            for p in 0..out.spatial() {
                for oc in 0..out.channels {
                    dyc[[n * out.spatial() + p, oc]] = src[oc * out.spatial() + p];
                }
            }
        }
        if !frozen {
            let dw = dyc.t().dot(cols);
            self.weight.grad_matrix().zip_mut_with(&dw, |g, d| *g += d);
            for (g, d) in self.bias.grad.iter_mut().zip(dyc.sum_axis(Axis(0))) {
                *g += d;
            }
        }
        let dcols = dyc.dot(&self.weight.matrix());
        self.col2im(&dcols, batch)
    }
}

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub shape: Shape3,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(shape: Shape3) -> Self {
        let c = shape.channels;
        BatchNorm {
            gamma: Param::new(vec![c], vec![1.0; c]),
            beta: Param::zeros(vec![c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            shape,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channel_values<'a>(&self, x: &'a Array2<f64>, ch: usize) -> impl Iterator<Item = f64> + 'a {
        let sp = self.shape.spatial();
        x.rows()
            .into_iter()
            .flat_map(move |r| r.slice_move(s![ch * sp..(ch + 1) * sp]).to_vec())
    }

    fn apply(&self, x: &Array2<f64>, mean: &[f64], inv_std: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let sp = self.shape.spatial();
        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for ch in 0..self.shape.channels {
                for v in row.slice_mut(s![ch * sp..(ch + 1) * sp]) {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for ch in 0..self.shape.channels {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in row.slice_mut(s![ch * sp..(ch + 1) * sp]) {
                    *v = g * *v + b;
                }
            }
        }
        (y, xhat)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        self.apply(x, &self.running_mean, &inv).0
    }

    /// Returns `(y, xhat, inv_std)` and updates running statistics.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        let c = self.shape.channels;
        let count = (x.nrows() * self.shape.spatial()) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let m = self.channel_values(x, ch).sum::<f64>() / count;
            let v = self.channel_values(x, ch).map(|t| (t - m) * (t - m)).sum::<f64>() / count;
            mean[ch] = m;
            var[ch] = v;
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, xhat) = self.apply(x, &mean, &inv);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }
        (y, xhat, inv)
    }

    pub fn backward(&mut self, xhat: &Array2<f64>, inv_std: &[f64], dy: &Array2<f64>, frozen: bool) -> Array2<f64> {
        let sp = self.shape.spatial();
        let count = (dy.nrows() * sp) as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for ch in 0..self.shape.channels {
            let range = ch * sp..(ch + 1) * sp;
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for (dr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
                for i in range.clone() {
                    sum_dy += dr[i];
                    sum_dy_xhat += dr[i] * xr[i];
                }
            }
            if !frozen {
                self.gamma.grad[ch] += sum_dy_xhat;
                self.beta.grad[ch] += sum_dy;
            }
            let g = self.gamma.value[ch];
            let k = g * inv_std[ch] / count;
            for ((dr, xr), mut out) in dy.rows().into_iter().zip(xhat.rows()).zip(dx.rows_mut()) {
                for i in range.clone() {
                    out[i] = k * (count * dr[i] - sum_dy - xr[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl BatchNorm {
    /// Backward pass when the normalization statistics are constants.
    pub fn backward_fixed(&mut self, xhat: &Array2<f64>, inv_std: &[f64], dy: &Array2<f64>, frozen: bool) -> Array2<f64> {
        let sp = self.shape.spatial();
        let mut dx = dy.clone();
        for ch in 0..self.shape.channels {
            let range = ch * sp..(ch + 1) * sp;
            if !frozen {
                for (dr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
                    for i in range.clone() {
                        self.gamma.grad[ch] += dr[i] * xr[i];
                        self.beta.grad[ch] += dr[i];
                    }
                }
            }
            let k = self.gamma.value[ch] * inv_std[ch];
            for mut row in dx.rows_mut() {
                row.slice_mut(s![range.clone()]).mapv_inplace(|v| v * k);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
}

#[derive(Clone, Debug)]
enum LayerCache {
    Input(Array2<f64>),
    Cols(Array2<f64>),
    Norm {
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mask(Array2<f64>),
}

/// A chain of layers with statically known input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    pub input: Shape3,
    pub output: Shape3,
}

#[derive(Clone, Debug)]
pub struct SequentialCache(Vec<LayerCache>);

impl Sequential {
    pub fn new(input: Shape3) -> Self {
        Sequential {
            layers: Vec::new(),
            input,
            output: input,
        }
    }

    /// Append a layer, checking that it accepts the current output shape.
    pub fn push(mut self, layer: Layer) -> Result<Self> {
        let next = match &layer {
            Layer::Linear(l) => {
                if l.input_len() != self.output.len() {
                    return Err(Error::Config(format!(
                        "linear layer expects {} inputs but previous layer yields {}",
                        l.input_len(),
                        self.output
                    )));
                }
                Shape3::vector(l.output_len())
            }
            Layer::Conv(c) => {
                if c.input != self.output {
                    return Err(Error::Config(format!(
                        "convolution expects {} but previous layer yields {}",
                        c.input, self.output
                    )));
                }
                c.output_shape()
            }
            Layer::BatchNorm(b) => {
                if b.shape != self.output {
                    return Err(Error::Config(format!(
                        "batch norm expects {} but previous layer yields {}",
                        b.shape, self.output
                    )));
                }
                self.output
            }
            Layer::Relu => self.output,
        };
        self.layers.push(layer);
        self.output = next;
        Ok(self)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => l.forward(&h),
                Layer::Conv(c) => c.forward(&h).0,
                Layer::BatchNorm(b) => b.forward_eval(&h),
                Layer::Relu => h.mapv(|v| v.max(0.0)),
            };
        }
        h
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> (Array2<f64>, SequentialCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Linear(l) => (l.forward(&h), LayerCache::Input(h)),
                Layer::Conv(c) => {
                    let (y, cols) = c.forward(&h);
                    (y, LayerCache::Cols(cols))
                }
                Layer::BatchNorm(b) => match mode {
                    Mode::Train => {
                        let (y, xhat, inv_std) = b.forward_train(&h);
                        (y, LayerCache::Norm { xhat, inv_std, batch_stats: true })
                    }
                    Mode::Eval => {
                        let inv_std: Vec<f64> =
                            b.running_var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
                        let (y, xhat) = b.apply(&h, &b.running_mean, &inv_std);
                        (y, LayerCache::Norm { xhat, inv_std, batch_stats: false })
                    }
                },
                Layer::Relu => {
                    let mask = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    (h.mapv(|v| v.max(0.0)), LayerCache::Mask(mask))
                }
            };
            caches.push(cache);
            h = next;
        }
        (h, SequentialCache(caches))
    }

    /// Backpropagate `dy`; parameter gradients accumulate unless `frozen`.
    ///
    /// Batch-norm layers run in `Eval` mode treat the running statistics as
    /// constants, so their input gradient is the plain affine rescale.
    pub fn backward(&mut self, cache: &SequentialCache, dy: &Array2<f64>, frozen: bool) -> Array2<f64> {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.0).rev() {
            g = match (layer, c) {
                (Layer::Linear(l), LayerCache::Input(x)) => l.backward(x, &g, frozen),
                (Layer::Conv(conv), LayerCache::Cols(cols)) => conv.backward(cols, &g, frozen),
                (Layer::BatchNorm(b), LayerCache::Norm { xhat, inv_std, batch_stats }) => {
                    if *batch_stats {
                        b.backward(xhat, inv_std, &g, frozen)
                    } else {
                        b.backward_fixed(xhat, inv_std, &g, frozen)
                    }
                }
                (Layer::Relu, LayerCache::Mask(m)) => g * m,
                _ => unreachable!("cache does not match layer"),
            };
        }
        g
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    f(format!("{i}.weight"), &l.weight);
                    f(format!("{i}.bias"), &l.bias);
                }
                Layer::Conv(c) => {
                    f(format!("{i}.weight"), &c.weight);
                    f(format!("{i}.bias"), &c.bias);
                }
                Layer::BatchNorm(b) => {
                    f(format!("{i}.gamma"), &b.gamma);
                    f(format!("{i}.beta"), &b.beta);
                }
                Layer::Relu => {}
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    f(format!("{i}.weight"), &mut l.weight);
                    f(format!("{i}.bias"), &mut l.bias);
                }
                Layer::Conv(c) => {
                    f(format!("{i}.weight"), &mut c.weight);
                    f(format!("{i}.bias"), &mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    f(format!("{i}.gamma"), &mut b.gamma);
                    f(format!("{i}.beta"), &mut b.beta);
                }
                Layer::Relu => {}
            }
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn for_each_buffer(&self, f: &mut dyn FnMut(String, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                f(format!("{i}.running_mean"), &b.running_mean);
                f(format!("{i}.running_var"), &b.running_var);
            }
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                f(format!("{i}.running_mean"), &mut b.running_mean);
                f(format!("{i}.running_var"), &mut b.running_var);
            }
        }
    }
}

/// Global average pooling over the spatial positions of each channel.
pub fn global_avg_pool(x: &Array2<f64>, shape: Shape3) -> Array2<f64> {
    let sp = shape.spatial();
    if sp == 1 {
        return x.clone();
    }
    let mut out = Array2::zeros((x.nrows(), shape.channels));
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..shape.channels {
            dst[ch] = src.slice(s![ch * sp..(ch + 1) * sp]).sum() / sp as f64;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, shape: Shape3) -> Array2<f64> {
    let sp = shape.spatial();
    if sp == 1 {
        return dy.clone();
    }
    let mut dx = Array2::zeros((dy.nrows(), shape.len()));
    for (src, mut dst) in dy.rows().into_iter().zip(dx.rows_mut()) {
        for ch in 0..shape.channels {
            dst.slice_mut(s![ch * sp..(ch + 1) * sp]).fill(src[ch] / sp as f64);
        }
    }
    dx
}

/// Euclidean norm of a flat buffer.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
