//! Depthwise separable convolution blocks and the block stack.
//!
//! One block runs: depthwise conv -> LReLU -> BN -> pointwise conv -> ReLU
//! -> BN -> max-pool over features -> dropout. Spatial padding keeps the
//! time length unchanged through every block; pooling shrinks only the
//! feature axis. The stack ends with a reshape of `[C_L, T, W_L]` to the
//! sequence matrix `[T, C_L * W_L]`.

use rand::RngCore;

use crate::layers::{
    BatchNorm, DepthwiseConv2d, Dropout, HasParams, LeakyRelu, MaxPoolWidth, Mode, Param,
    PointwiseConv2d,
};
use crate::tensor::{Pad, Tensor};

use super::{ModelError, Result};

pub struct DwsBlock {
    depthwise: DepthwiseConv2d,
    lrelu: LeakyRelu,
    bn_mid: BatchNorm,
    pointwise: PointwiseConv2d,
    relu: LeakyRelu,
    bn_out: BatchNorm,
    pool: MaxPoolWidth,
    dropout: Dropout,
}

impl DwsBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        pool_width: usize,
        dropout_p: f64,
        lrelu_beta: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let pad = Pad::symmetric((kernel.0 - 1) / 2, (kernel.1 - 1) / 2);
        Ok(Self {
            depthwise: DepthwiseConv2d::init(c_in, kernel.0, kernel.1, pad, rng),
            lrelu: LeakyRelu::new(lrelu_beta),
            bn_mid: BatchNorm::new(c_in),
            pointwise: PointwiseConv2d::init(c_out, c_in, rng),
            relu: LeakyRelu::new(0.0),
            bn_out: BatchNorm::new(c_out),
            pool: MaxPoolWidth::new(pool_width),
            dropout: Dropout::new(dropout_p).map_err(ModelError::Layer)?,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn_mid.set_mode(mode);
        self.bn_out.set_mode(mode);
        self.dropout.set_mode(mode);
    }

    pub fn forward(&mut self, input: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        let d = self.depthwise.forward(input)?;
        let d = self.lrelu.forward(&d);
        let d = self.bn_mid.forward(&d)?;
        let s = self.pointwise.forward(&d)?;
        let s = self.relu.forward(&s);
        let h = self.bn_out.forward(&s)?;
        let h = self.pool.forward(&h)?;
        Ok(self.dropout.forward(&h, rng))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let g = self.dropout.backward(upstream)?;
        let g = self.pool.backward(&g)?;
        let g = self.bn_out.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.pointwise.backward(&g)?;
        let g = self.bn_mid.backward(&g)?;
        let g = self.lrelu.backward(&g)?;
        Ok(self.depthwise.backward(&g)?)
    }

    pub fn for_each_buffer(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}bn_mid.running_mean"), &mut self.bn_mid.running_mean);
        f(&format!("{prefix}bn_mid.running_var"), &mut self.bn_mid.running_var);
        f(&format!("{prefix}bn_out.running_mean"), &mut self.bn_out.running_mean);
        f(&format!("{prefix}bn_out.running_var"), &mut self.bn_out.running_var);
    }
}

impl HasParams for DwsBlock {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.depthwise.for_each_param(&format!("{prefix}depthwise."), f);
        self.bn_mid.for_each_param(&format!("{prefix}bn_mid."), f);
        self.pointwise.for_each_param(&format!("{prefix}pointwise."), f);
        self.bn_out.for_each_param(&format!("{prefix}bn_out."), f);
    }
}

/// The L-block feature extractor plus the final reshape to `[T, W_f]`.
pub struct DwsStack {
    blocks: Vec<DwsBlock>,
    // Shape of H_L before the reshape, cached for backward.
    last_shape: Option<(usize, usize, usize)>,
}

impl DwsStack {
    pub fn init(
        channels: &[usize],
        kernel: (usize, usize),
        pool_widths: &[usize],
        dropout_p: f64,
        lrelu_beta: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = 1;
        for (l, (&c_out, &pool)) in channels.iter().zip(pool_widths).enumerate() {
            let _ = l;
            blocks.push(DwsBlock::init(
                c_in, c_out, kernel, pool, dropout_p, lrelu_beta, rng,
            )?);
            c_in = c_out;
        }
        Ok(Self {
            blocks,
            last_shape: None,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in &mut self.blocks {
            b.set_mode(mode);
        }
    }

    /// `input` is `[1, T, F]`; returns `H'` as `[T, C_L * W_L]` with the
    /// feature index laid out channel-major: `H'[t, c*W_L + w] = H_L[c, t, w]`.
    pub fn forward(&mut self, input: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        let mut h = input.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, rng)?;
        }
        let (c, t, w) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        self.last_shape = Some((c, t, w));
        let mut out = Tensor::zeros(&[t, c * w]);
        for ch in 0..c {
            for step in 0..t {
                for x in 0..w {
                    out.set2(step, ch * w + x, h.at3(ch, step, x));
                }
            }
        }
        Ok(out)
    }

    /// Upstream is `[T, W_f]`; returns the gradient at the `[1, T, F]` input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (c, t, w) = self.last_shape.take().ok_or(ModelError::MissingForward)?;
        let mut g = Tensor::zeros(&[c, t, w]);
        for ch in 0..c {
            for step in 0..t {
                for x in 0..w {
                    g.set3(ch, step, x, upstream.at2(step, ch * w + x));
                }
            }
        }
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }

    pub fn for_each_buffer(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_buffer(&format!("{prefix}{i}."), f);
        }
    }
}

impl HasParams for DwsStack {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}{i}."), f);
        }
    }
}
