//! Differentiable layer primitives: depthwise and pointwise convolution,
//! leaky ReLU, batch normalization, width max-pooling, inverted dropout, and
//! the shared-weight linear classifier. Each layer owns its parameters,
//! same-shaped gradient slots, and the forward cache its backward consumes.

use rand::Rng;
use rand::RngCore;
use thiserror::Error;

use crate::tensor::{conv2d_backward, matmul, transpose, Pad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: kernel channel count {kernels} does not match input channel count {input}")]
    ChannelMismatch {
        layer: &'static str,
        input: usize,
        kernels: usize,
    },
    #[error("{layer}: backward called without a cached forward pass")]
    MissingCache { layer: &'static str },
    #[error("batchnorm: training mode needs at least 2 values per channel, got {got}")]
    BatchTooSmall { got: usize },
    #[error("maxpool: width {width} is not divisible by pool width {pool}")]
    WidthNotDivisible { width: usize, pool: usize },
    #[error("dropout: probability {0} is outside [0, 1)")]
    BadProbability(f64),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Training vs inference behaviour switch for the stochastic/statistic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named parameter tensor with a same-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitation over named parameters, used by the optimizer and checkpoints.
pub trait HasParams {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

/// Uniform init over +-sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut dyn RngCore, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Depthwise convolution
// ---------------------------------------------------------------------------

/// Per-channel spatial convolution: one `K_h x K_w` kernel per input channel,
/// output channel c depends only on input channel c. Unit stride, unit
/// dilation, explicit zero padding.
pub struct DepthwiseConv2d {
    pub kernels: Param, // [C, K_h, K_w]
    pub pad: Pad,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(kernels: Tensor, pad: Pad) -> Self {
        assert_eq!(kernels.rank(), 3);
        Self {
            kernels: Param::new(kernels),
            pad,
            cache: None,
        }
    }

    pub fn init(channels: usize, k_h: usize, k_w: usize, pad: Pad, rng: &mut dyn RngCore) -> Self {
        Self::new(
            kaiming_uniform(rng, k_h * k_w, &[channels, k_h, k_w]),
            pad,
        )
    }

    fn single_channel_kernels(&self, c: usize) -> Tensor {
        let (k_h, k_w) = (self.kernels.value.shape()[1], self.kernels.value.shape()[2]);
        let slice = &self.kernels.value.data()[c * k_h * k_w..(c + 1) * k_h * k_w];
        Tensor::from_parts(vec![1, 1, k_h, k_w], slice.to_vec())
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let c = input.shape()[0];
        let kc = self.kernels.value.shape()[0];
        if c != kc {
            return Err(LayerError::ChannelMismatch {
                layer: "depthwise_conv",
                input: c,
                kernels: kc,
            });
        }
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (k_h, k_w) = (self.kernels.value.shape()[1], self.kernels.value.shape()[2]);
        let h_out = h + self.pad.top + self.pad.bottom - (k_h - 1);
        let w_out = w + self.pad.left + self.pad.right - (k_w - 1);
        let mut out = vec![0.0; c * h_out * w_out];
        for ch in 0..c {
            let in_ch = Tensor::from_parts(
                vec![1, h, w],
                input.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
            );
            let kern = self.single_channel_kernels(ch);
            let o = crate::tensor::conv2d(&in_ch, &kern, (1, 1), self.pad)?;
            out[ch * h_out * w_out..(ch + 1) * h_out * w_out].copy_from_slice(o.data());
        }
        self.cache = Some(input.clone());
        Ok(Tensor::from_parts(vec![c, h_out, w_out], out))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or(LayerError::MissingCache {
            layer: "depthwise_conv",
        })?;
        let c = input.shape()[0];
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (k_h, k_w) = (self.kernels.value.shape()[1], self.kernels.value.shape()[2]);
        let (h_out, w_out) = (upstream.shape()[1], upstream.shape()[2]);
        let mut d_in = vec![0.0; c * h * w];
        for ch in 0..c {
            let in_ch = Tensor::from_parts(
                vec![1, h, w],
                input.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
            );
            let kern = self.single_channel_kernels(ch);
            let up_ch = Tensor::from_parts(
                vec![1, h_out, w_out],
                upstream.data()[ch * h_out * w_out..(ch + 1) * h_out * w_out].to_vec(),
            );
            let (di, dk) = conv2d_backward(&in_ch, &kern, (1, 1), self.pad, &up_ch)?;
            d_in[ch * h * w..(ch + 1) * h * w].copy_from_slice(di.data());
            let base = ch * k_h * k_w;
            for (i, g) in dk.data().iter().enumerate() {
                self.kernels.grad.data_mut()[base + i] += g;
            }
        }
        Ok(Tensor::from_parts(vec![c, h, w], d_in))
    }
}

impl HasParams for DepthwiseConv2d {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}kernels"), &mut self.kernels);
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1 cross-channel) convolution
// ---------------------------------------------------------------------------

/// Cross-channel mixing: `out[o,h,w] = sum_c in[c,h,w] * z[o,c]`.
pub struct PointwiseConv2d {
    pub weights: Param, // [C_out, C_in]
    cache: Option<Tensor>,
}

impl PointwiseConv2d {
    pub fn new(weights: Tensor) -> Self {
        assert_eq!(weights.rank(), 2);
        Self {
            weights: Param::new(weights),
            cache: None,
        }
    }

    pub fn init(c_out: usize, c_in: usize, rng: &mut dyn RngCore) -> Self {
        Self::new(kaiming_uniform(rng, c_in, &[c_out, c_in]))
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let wc = self.weights.value.shape()[1];
        if c_in != wc {
            return Err(LayerError::ChannelMismatch {
                layer: "pointwise_conv",
                input: c_in,
                kernels: wc,
            });
        }
        let c_out = self.weights.value.shape()[0];
        let flat = Tensor::from_parts(vec![c_in, h * w], input.data().to_vec());
        let out = matmul(&self.weights.value, &flat)?;
        self.cache = Some(input.clone());
        Ok(out.reshape(vec![c_out, h, w])?)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or(LayerError::MissingCache {
            layer: "pointwise_conv",
        })?;
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let c_out = self.weights.value.shape()[0];
        let up_flat = Tensor::from_parts(vec![c_out, h * w], upstream.data().to_vec());
        let in_flat = Tensor::from_parts(vec![c_in, h * w], input.data().to_vec());
        // d_z = up . in^T ; d_in = z^T . up
        let d_w = matmul(&up_flat, &transpose(&in_flat))?;
        self.weights.grad.scaled_add(1.0, &d_w)?;
        let d_in = matmul(&transpose(&self.weights.value), &up_flat)?;
        Ok(d_in.reshape(vec![c_in, h, w])?)
    }
}

impl HasParams for PointwiseConv2d {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}weights"), &mut self.weights);
    }
}

// ---------------------------------------------------------------------------
// Leaky ReLU
// ---------------------------------------------------------------------------

/// Elementwise `x if x >= 0 else beta * x`. `beta = 0` is plain ReLU.
pub struct LeakyRelu {
    pub beta: f64,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta));
        Self { beta, cache: None }
    }

    pub fn forward(&mut self, input: &Tensor) -> Tensor {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= self.beta;
            }
        }
        self.cache = Some(input.clone());
        out
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or(LayerError::MissingCache { layer: "lrelu" })?;
        let mut d_in = upstream.clone();
        for (g, x) in d_in.data_mut().iter_mut().zip(input.data()) {
            if *x < 0.0 {
                *g *= self.beta;
            }
        }
        Ok(d_in)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Per-channel batch normalization over `[N, C, H, W]` (a rank-3 `[C, H, W]`
/// input is treated as `N = 1`). Training normalizes by batch statistics and
/// updates running statistics with momentum; inference normalizes by the
/// running statistics only.
pub struct BatchNorm {
    pub gamma: Param,         // [C]
    pub beta: Param,          // [C]
    pub running_mean: Tensor, // [C]
    pub running_var: Tensor,  // [C]
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            epsilon: 1e-5,
            mode: Mode::Train,
            cache: None,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn dims(input: &Tensor) -> (usize, usize, usize, bool) {
        match input.rank() {
            3 => (1, input.shape()[0], input.shape()[1] * input.shape()[2], true),
            4 => (
                input.shape()[0],
                input.shape()[1],
                input.shape()[2] * input.shape()[3],
                false,
            ),
            r => panic!("batchnorm expects rank 3 or 4 input, got rank {r}"),
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (n, c, spatial, _) = Self::dims(input);
        let m = n * spatial;
        let mut out = input.clone();
        let mut x_hat = input.zeros_like();
        let mut inv_std = vec![0.0; c];

        for ch in 0..c {
            let (mean, var) = match self.mode {
                Mode::Train => {
                    if m < 2 {
                        return Err(LayerError::BatchTooSmall { got: m });
                    }
                    let mut sum = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for i in 0..spatial {
                            sum += input.data()[base + i];
                        }
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for i in 0..spatial {
                            let d = input.data()[base + i] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / m as f64;
                    let mom = self.momentum;
                    self.running_mean.data_mut()[ch] =
                        (1.0 - mom) * self.running_mean.data()[ch] + mom * mean;
                    self.running_var.data_mut()[ch] =
                        (1.0 - mom) * self.running_var.data()[ch] + mom * var;
                    (mean, var)
                }
                Mode::Infer => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let istd = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value.data()[ch];
            let b_shift = self.beta.value.data()[ch];
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for i in 0..spatial {
                    let xh = (input.data()[base + i] - mean) * istd;
                    x_hat.data_mut()[base + i] = xh;
                    out.data_mut()[base + i] = g * xh + b_shift;
                }
            }
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            mode: self.mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(LayerError::MissingCache { layer: "batchnorm" })?;
        let (n, c, spatial, _) = Self::dims(upstream);
        let m = (n * spatial) as f64;
        let mut d_in = upstream.zeros_like();

        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let istd = cache.inv_std[ch];
            let mut d_gamma = 0.0;
            let mut d_beta = 0.0;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for i in 0..spatial {
                    let dy = upstream.data()[base + i];
                    let xh = cache.x_hat.data()[base + i];
                    d_gamma += dy * xh;
                    d_beta += dy;
                    let dxh = dy * g;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh;
                }
            }
            self.gamma.grad.data_mut()[ch] += d_gamma;
            self.beta.grad.data_mut()[ch] += d_beta;

            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for i in 0..spatial {
                    let dy = upstream.data()[base + i];
                    let dxh = dy * g;
                    let dx = match cache.mode {
                        // Through the batch statistics.
                        Mode::Train => {
                            let xh = cache.x_hat.data()[base + i];
                            istd * (dxh - sum_dxhat / m - xh * sum_dxhat_xhat / m)
                        }
                        // Running stats are constants.
                        Mode::Infer => dxh * istd,
                    };
                    d_in.data_mut()[base + i] = dx;
                }
            }
        }
        Ok(d_in)
    }
}

impl HasParams for BatchNorm {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Max pooling over the feature (width) axis
// ---------------------------------------------------------------------------

/// Non-overlapping max pool with kernel and stride `(1, k_w)`. Height is
/// untouched; width must be divisible by `k_w`.
pub struct MaxPoolWidth {
    pub k_w: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>, // (input shape, argmax flat indices)
}

impl MaxPoolWidth {
    pub fn new(k_w: usize) -> Self {
        assert!(k_w >= 1);
        Self { k_w, cache: None }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        if w % self.k_w != 0 {
            return Err(LayerError::WidthNotDivisible {
                width: w,
                pool: self.k_w,
            });
        }
        let w_out = w / self.k_w;
        let mut out = vec![0.0; c * h * w_out];
        let mut argmax = vec![0usize; c * h * w_out];
        for ch in 0..c {
            for y in 0..h {
                let row_base = (ch * h + y) * w;
                for j in 0..w_out {
                    let start = row_base + j * self.k_w;
                    let mut best = input.data()[start];
                    let mut best_idx = start;
                    // First occurrence wins ties.
                    for k in 1..self.k_w {
                        let v = input.data()[start + k];
                        if v > best {
                            best = v;
                            best_idx = start + k;
                        }
                    }
                    out[(ch * h + y) * w_out + j] = best;
                    argmax[(ch * h + y) * w_out + j] = best_idx;
                }
            }
        }
        self.cache = Some((input.shape().to_vec(), argmax));
        Ok(Tensor::from_parts(vec![c, h, w_out], out))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (in_shape, argmax) = self
            .cache
            .take()
            .ok_or(LayerError::MissingCache { layer: "maxpool" })?;
        let mut d_in = Tensor::zeros(&in_shape);
        for (u, &idx) in upstream.data().iter().zip(&argmax) {
            d_in.data_mut()[idx] += u;
        }
        Ok(d_in)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: in training each element is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`; inference is the identity.
pub struct Dropout {
    pub p: f64,
    pub mode: Mode,
    cache: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(LayerError::BadProbability(p));
        }
        Ok(Self {
            p,
            mode: Mode::Train,
            cache: None,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward(&mut self, input: &Tensor, rng: &mut dyn RngCore) -> Tensor {
        match self.mode {
            Mode::Infer => {
                self.cache = None;
                input.clone()
            }
            Mode::Train => {
                let keep = 1.0 / (1.0 - self.p);
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| {
                        if rng.gen::<f64>() < self.p {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                let mut out = input.clone();
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                self.cache = Some(mask);
                out
            }
        }
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match self.cache.take() {
            None => Ok(upstream.clone()),
            Some(mask) => {
                let mut d_in = upstream.clone();
                for (g, m) in d_in.data_mut().iter_mut().zip(&mask) {
                    *g *= m;
                }
                Ok(d_in)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared-weight linear classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Softmax,
}

struct ClsCache {
    input: Tensor, // [T, In]
    probs: Tensor, // [T, C]
}

/// Affine map plus activation, applied row-wise with weights shared across
/// time steps.
pub struct LinearClassifier {
    pub weights: Param, // [C, In]
    pub bias: Param,    // [C]
    pub activation: Activation,
    cache: Option<ClsCache>,
}

impl LinearClassifier {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Self {
        assert_eq!(weights.rank(), 2);
        assert_eq!(bias.shape(), &[weights.shape()[0]]);
        Self {
            weights: Param::new(weights),
            bias: Param::new(bias),
            activation,
            cache: None,
        }
    }

    pub fn init(classes: usize, features: usize, activation: Activation, rng: &mut dyn RngCore) -> Self {
        Self::new(
            kaiming_uniform(rng, features, &[classes, features]),
            Tensor::zeros(&[classes]),
            activation,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.weights.value.shape()[1]
    }

    /// Activation over one row of logits, in place.
    fn activate(&self, logits: &mut [f64]) {
        match self.activation {
            Activation::Sigmoid => {
                for v in logits.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            Activation::Softmax => {
                // log-sum-exp stabilization
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in logits.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in logits.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }

    /// Single-step forward with no caching; the sequential head does its own
    /// bookkeeping. `probs` must have length `C`.
    pub fn forward_step(&self, input: &[f64], probs: &mut [f64]) {
        let c = self.num_classes();
        let feats = self.num_features();
        debug_assert_eq!(input.len(), feats);
        debug_assert_eq!(probs.len(), c);
        for cls in 0..c {
            let row = &self.weights.value.data()[cls * feats..(cls + 1) * feats];
            let mut acc = self.bias.value.data()[cls];
            for (x, w) in input.iter().zip(row) {
                acc += x * w;
            }
            probs[cls] = acc;
        }
        self.activate(probs);
    }

    /// Backward for one step: accumulates weight/bias grads and writes the
    /// input gradient. All step tensors are supplied by the caller.
    pub fn backward_step(
        &mut self,
        input: &[f64],
        probs: &[f64],
        d_probs: &[f64],
        d_input: &mut [f64],
    ) {
        let c = self.num_classes();
        let feats = self.num_features();
        let mut d_logits = vec![0.0; c];
        match self.activation {
            Activation::Sigmoid => {
                for i in 0..c {
                    d_logits[i] = d_probs[i] * probs[i] * (1.0 - probs[i]);
                }
            }
            Activation::Softmax => {
                let dot: f64 = d_probs.iter().zip(probs).map(|(d, p)| d * p).sum();
                for i in 0..c {
                    d_logits[i] = probs[i] * (d_probs[i] - dot);
                }
            }
        }
        d_input.fill(0.0);
        for cls in 0..c {
            let dl = d_logits[cls];
            self.bias.grad.data_mut()[cls] += dl;
            let w_row = &self.weights.value.data()[cls * feats..(cls + 1) * feats];
            let g_row = &mut self.weights.grad.data_mut()[cls * feats..(cls + 1) * feats];
            for i in 0..feats {
                g_row[i] += dl * input[i];
                d_input[i] += dl * w_row[i];
            }
        }
    }

    /// Batched forward over a `[T, In]` matrix; caches for `backward_matrix`.
    pub fn forward_matrix(&mut self, input: &Tensor) -> Result<Tensor> {
        let t = input.shape()[0];
        let c = self.num_classes();
        let logits = matmul(input, &transpose(&self.weights.value))?;
        let mut probs = logits;
        for step in 0..t {
            let row = probs.row_mut(step);
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
            self.activate(row);
        }
        let probs = Tensor::from_parts(vec![t, c], probs.into_data());
        self.cache = Some(ClsCache {
            input: input.clone(),
            probs: probs.clone(),
        });
        Ok(probs)
    }

    /// Batched backward matching `forward_matrix`.
    pub fn backward_matrix(&mut self, d_probs: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(LayerError::MissingCache { layer: "classifier" })?;
        let t = cache.input.shape()[0];
        let feats = self.num_features();
        let mut d_input = Tensor::zeros(&[t, feats]);
        for step in 0..t {
            let mut d_row = vec![0.0; feats];
            self.backward_step(
                cache.input.row(step),
                cache.probs.row(step),
                d_probs.row(step),
                &mut d_row,
            );
            d_input.row_mut(step).copy_from_slice(&d_row);
        }
        Ok(d_input)
    }
}

impl HasParams for LinearClassifier {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}weights"), &mut self.weights);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    // -- depthwise ----------------------------------------------------------

    #[test]
    fn depthwise_single_channel_collapses_to_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[1, 5, 5]);
        let kern = rand_tensor(&mut rng, &[1, 3, 3]);
        let mut layer = DepthwiseConv2d::new(kern.clone(), Pad::symmetric(1, 1));
        let out = layer.forward(&input).unwrap();
        let kern4 = Tensor::from_parts(vec![1, 1, 3, 3], kern.data().to_vec());
        let expect = crate::tensor::conv2d(&input, &kern4, (1, 1), Pad::symmetric(1, 1)).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn depthwise_identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[2, 4, 4]);
        // Channel 0: identity-center 3x3; channel 1: zeros.
        let mut kern = Tensor::zeros(&[2, 3, 3]);
        kern.set3(0, 1, 1, 1.0);
        let mut layer = DepthwiseConv2d::new(kern, Pad::symmetric(1, 1));
        let out = layer.forward(&input).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at3(0, y, x), input.at3(0, y, x));
                assert_eq!(out.at3(1, y, x), 0.0);
            }
        }
    }

    #[test]
    fn depthwise_matches_per_channel_conv2d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, &[4, 6, 5]);
        let kern = rand_tensor(&mut rng, &[4, 3, 3]);
        let mut layer = DepthwiseConv2d::new(kern.clone(), Pad::symmetric(1, 1));
        let out = layer.forward(&input).unwrap();
        for c in 0..4 {
            let in_c = Tensor::from_parts(vec![1, 6, 5], input.data()[c * 30..(c + 1) * 30].to_vec());
            let k_c = Tensor::from_parts(vec![1, 1, 3, 3], kern.data()[c * 9..(c + 1) * 9].to_vec());
            let expect = crate::tensor::conv2d(&in_c, &k_c, (1, 1), Pad::symmetric(1, 1)).unwrap();
            for y in 0..6 {
                for x in 0..5 {
                    assert!((out.at3(c, y, x) - expect.at3(0, y, x)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut layer = DepthwiseConv2d::init(2, 3, 3, Pad::symmetric(1, 1), &mut rng);
        assert!(matches!(
            layer.forward(&input),
            Err(LayerError::ChannelMismatch { .. })
        ));
    }

    // -- pointwise ----------------------------------------------------------

    #[test]
    fn pointwise_identity_weights_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&mut rng, &[3, 4, 2]);
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut layer = PointwiseConv2d::new(eye);
        let out = layer.forward(&input).unwrap();
        assert!(out.max_abs_diff(&input) <= 1e-15);
    }

    #[test]
    fn pointwise_ones_row_sums_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = rand_tensor(&mut rng, &[2, 3, 3]);
        let mut layer = PointwiseConv2d::new(Tensor::full(&[1, 2], 1.0));
        let out = layer.forward(&input).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expect = input.at3(0, y, x) + input.at3(1, y, x);
                assert!((out.at3(0, y, x) - expect).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn pointwise_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, &[4, 3, 5]);
        let z = rand_tensor(&mut rng, &[2, 4]);
        let mut layer = PointwiseConv2d::new(z.clone());
        let out = layer.forward(&input).unwrap();
        for o in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        acc += input.at3(c, y, x) * z.at2(o, c);
                    }
                    assert!((out.at3(o, y, x) - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn pointwise_backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_tensor(&mut rng, &[3, 2, 2]);
        let upstream = rand_tensor(&mut rng, &[2, 2, 2]);
        let z = rand_tensor(&mut rng, &[2, 3]);

        let mut a = PointwiseConv2d::new(z.clone());
        let _ = a.forward(&input).unwrap();
        let d_in_1 = a.backward(&upstream).unwrap();

        let mut doubled = upstream.clone();
        doubled.scale(2.0);
        let mut b = PointwiseConv2d::new(z);
        let _ = b.forward(&input).unwrap();
        let d_in_2 = b.backward(&doubled).unwrap();

        let mut expect_in = d_in_1.clone();
        expect_in.scale(2.0);
        assert!(d_in_2.max_abs_diff(&expect_in) <= 1e-12);
        let mut expect_w = a.weights.grad.clone();
        expect_w.scale(2.0);
        assert!(b.weights.grad.max_abs_diff(&expect_w) <= 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut layer = DepthwiseConv2d::init(3, 3, 3, Pad::symmetric(1, 1), &mut rng);
        let _ = layer.forward(&input).unwrap();
        let d_in = layer.backward(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(d_in.data().iter().all(|&v| v == 0.0));
        assert!(layer.kernels.grad.data().iter().all(|&v| v == 0.0));
    }

    // -- lrelu ---------------------------------------------------------------

    #[test]
    fn lrelu_default_beta() {
        let mut layer = LeakyRelu::new(0.01);
        let out = layer.forward(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(out.data(), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn lrelu_zero_beta_is_relu() {
        let mut layer = LeakyRelu::new(0.0);
        let out = layer.forward(&Tensor::new(vec![4], vec![-3.0, -0.5, 0.0, 1.5]).unwrap());
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn lrelu_half_beta() {
        let mut layer = LeakyRelu::new(0.5);
        let out = layer.forward(&Tensor::new(vec![1], vec![-4.0]).unwrap());
        assert_eq!(out.data(), &[-2.0]);
    }

    // -- batchnorm ------------------------------------------------------------

    #[test]
    fn batchnorm_inference_centers_constant_input() {
        let mut bn = BatchNorm::new(2);
        bn.set_mode(Mode::Infer);
        bn.running_mean.data_mut().copy_from_slice(&[3.0, -1.0]);
        bn.running_var.data_mut().copy_from_slice(&[1.0, 1.0]);
        let mut input = Tensor::zeros(&[2, 2, 2]);
        for i in 0..4 {
            input.data_mut()[i] = 3.0; // channel 0
            input.data_mut()[4 + i] = -1.0; // channel 1
        }
        let out = bn.forward(&input).unwrap();
        // epsilon keeps this approximate, not exact
        assert!(out.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn batchnorm_two_sample_hand_oracle() {
        // Channel values {0, 2}: mu = 1, biased var = 1 -> outputs ~ {-1, +1}.
        let mut bn = BatchNorm::new(1);
        let input = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let out = bn.forward(&input).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_running_stats_follow_scalar_recurrence() {
        let mut bn = BatchNorm::new(1);
        let a = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap(); // mu=1, var=1
        let b = Tensor::new(vec![2, 1, 1, 1], vec![4.0, 8.0]).unwrap(); // mu=6, var=4
        let mom = bn.momentum;
        // Scalar oracle: m_new = (1-mom)*m_old + mom*m_batch.
        let mut m = 0.0;
        let mut v = 1.0;
        let _ = bn.forward(&a).unwrap();
        m = (1.0 - mom) * m + mom * 1.0;
        v = (1.0 - mom) * v + mom * 1.0;
        assert!((bn.running_mean.data()[0] - m).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - v).abs() < 1e-12);
        let _ = bn.forward(&b).unwrap();
        m = (1.0 - mom) * m + mom * 6.0;
        v = (1.0 - mom) * v + mom * 4.0;
        assert!((bn.running_mean.data()[0] - m).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - v).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_value_training_batch() {
        let mut bn = BatchNorm::new(1);
        let input = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        assert!(matches!(
            bn.forward(&input),
            Err(LayerError::BatchTooSmall { .. })
        ));
    }

    // -- maxpool --------------------------------------------------------------

    #[test]
    fn maxpool_width40_by_5() {
        let mut pool = MaxPoolWidth::new(5);
        let out = pool.forward(&Tensor::full(&[1, 2, 40], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 8]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn maxpool_pair() {
        let mut pool = MaxPoolWidth::new(2);
        let out = pool
            .forward(&Tensor::new(vec![1, 1, 2], vec![3.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn maxpool_matches_brute_force_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = rand_tensor(&mut rng, &[3, 4, 12]);
        let mut pool = MaxPoolWidth::new(4);
        let out = pool.forward(&input).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for j in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for k in 0..4 {
                        best = best.max(input.at3(c, y, j * 4 + k));
                    }
                    assert_eq!(out.at3(c, y, j), best);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_non_divisible_width() {
        let mut pool = MaxPoolWidth::new(3);
        assert!(matches!(
            pool.forward(&Tensor::zeros(&[1, 1, 8])),
            Err(LayerError::WidthNotDivisible { .. })
        ));
    }

    #[test]
    fn maxpool_backward_conserves_grad_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(&mut rng, &[2, 3, 8]);
        let upstream = rand_tensor(&mut rng, &[2, 3, 2]);
        let mut pool = MaxPoolWidth::new(4);
        let _ = pool.forward(&input).unwrap();
        let d_in = pool.backward(&upstream).unwrap();
        let up_sum: f64 = upstream.data().iter().sum();
        let in_sum: f64 = d_in.data().iter().sum();
        assert!((up_sum - in_sum).abs() <= 1e-12);
        // Each window routes to exactly one position.
        let nonzero = d_in.data().iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= upstream.len());
    }

    // -- dropout ---------------------------------------------------------------

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = rand_tensor(&mut rng, &[3, 3, 3]);
        let mut drop = Dropout::new(0.0).unwrap();
        let out = drop.forward(&input, &mut rng);
        assert!(out.max_abs_diff(&input) <= 1e-15);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = rand_tensor(&mut rng, &[3, 3, 3]);
        let mut drop = Dropout::new(0.9).unwrap();
        drop.set_mode(Mode::Infer);
        let out = drop.forward(&input, &mut rng);
        assert!(out.max_abs_diff(&input) <= 1e-15);
    }

    #[test]
    fn dropout_quarter_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let input = Tensor::full(&[1000000], 1.0);
        let mut drop = Dropout::new(0.25).unwrap();
        let out = drop.forward(&input, &mut rng);
        let mean: f64 = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        let zero_frac =
            out.data().iter().filter(|v| **v == 0.0).count() as f64 / out.len() as f64;
        assert!((0.245..=0.255).contains(&zero_frac), "zeros {zero_frac}");
    }

    #[test]
    fn dropout_rejects_p_one() {
        assert!(matches!(Dropout::new(1.0), Err(LayerError::BadProbability(_))));
    }

    // -- classifier --------------------------------------------------------------

    #[test]
    fn classifier_zero_params_softmax_is_uniform() {
        let mut cls = LinearClassifier::new(
            Tensor::zeros(&[16, 8]),
            Tensor::zeros(&[16]),
            Activation::Softmax,
        );
        let out = cls.forward_matrix(&Tensor::full(&[2, 8], 0.3)).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 16.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn classifier_zero_params_sigmoid_is_half() {
        let mut cls = LinearClassifier::new(
            Tensor::zeros(&[4, 8]),
            Tensor::zeros(&[4]),
            Activation::Sigmoid,
        );
        let out = cls.forward_matrix(&Tensor::full(&[3, 8], -0.7)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() <= 1e-15));
    }

    #[test]
    fn classifier_softmax_hand_values() {
        // Identity weights, zero bias: logits [1,2,3].
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut cls = LinearClassifier::new(eye, Tensor::zeros(&[3]), Activation::Softmax);
        let out = cls
            .forward_matrix(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let expect = [0.0900, 0.2447, 0.6652];
        for (v, e) in out.data().iter().zip(&expect) {
            assert!((v - e).abs() <= 1e-4, "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut cls = LinearClassifier::new(eye, Tensor::zeros(&[3]), Activation::Softmax);
        for logits in [
            [500.0, -500.0, 0.0],
            [500.0, 499.0, 498.0],
            [-500.0, -500.0, -500.0],
        ] {
            let out = cls
                .forward_matrix(&Tensor::new(vec![1, 3], logits.to_vec()).unwrap())
                .unwrap();
            let sum: f64 = out.data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        }
    }

    #[test]
    fn classifier_backward_needs_cache() {
        let mut cls = LinearClassifier::new(
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2]),
            Activation::Sigmoid,
        );
        assert!(matches!(
            cls.backward_matrix(&Tensor::zeros(&[1, 2])),
            Err(LayerError::MissingCache { .. })
        ));
    }

    #[test]
    fn dws_parameter_factor() {
        // depthwise C*K_h*K_w + pointwise C_out*C_in over standard C_out*C_in*K_h*K_w
        let (c_in, c_out, k_h, k_w) = (100usize, 100usize, 5usize, 5usize);
        let dws = c_in * k_h * k_w + c_out * c_in;
        let standard = c_out * c_in * k_h * k_w;
        assert_eq!(dws, 12_500);
        assert_eq!(standard, 250_000);
        let ratio = dws as f64 / standard as f64;
        assert!((ratio - (1.0 / c_out as f64 + 1.0 / (k_h * k_w) as f64)).abs() < 1e-15);
        assert!((ratio - 0.05).abs() < 1e-15);
    }
}
