//! Time-dilated convolution heads over the sequence matrix `H'`.
//!
//! [`DilatedHead`] is the batched, non-conditioned path: one dilated
//! convolution over the whole sequence, flattened per step and classified
//! with shared weights. [`ConditionedHead`] is the sequential variant: a
//! two-channel dilated convolution whose second channel starts at zero and
//! is filled, step by step, with an affine embedding of the classifier's
//! previous output, so every prediction sees the model's own recent
//! predictions through the dilated window.

use rand::RngCore;

use crate::layers::{kaiming_uniform, Activation, HasParams, LinearClassifier, Param};
use crate::tensor::{conv2d_backward, conv2d_im2col, Pad, Tensor};

use super::{ModelError, Result};

/// Time padding policy for the batched head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimePadding {
    /// `dilation*(K_h-1)/2` rows of zeros on each side; output step t sees
    /// past and future context. This is the non-conditioned baseline.
    Symmetric,
    /// `dilation*(K_h-1)` rows of zeros on the left only; output step t sees
    /// rows `<= t`. Matches the conditioned head's window construction.
    Causal,
}

struct DilatedCache {
    input: Tensor,    // [C_in, T, W_f]
    conv_out_w: usize,
}

/// Batched time-dilated convolution plus shared-weight classifier.
pub struct DilatedHead {
    pub kernels: Param, // [K_o, C_in, K_h, K_w]
    pub classifier: LinearClassifier,
    pub dilation: usize,
    pub padding: TimePadding,
    cache: Option<DilatedCache>,
}

impl DilatedHead {
    pub fn new(
        kernels: Tensor,
        classifier: LinearClassifier,
        dilation: usize,
        padding: TimePadding,
    ) -> Result<Self> {
        let k_h = kernels.shape()[2];
        if k_h % 2 == 0 {
            return Err(ModelError::EvenTimeKernel { k_h });
        }
        Ok(Self {
            kernels: Param::new(kernels),
            classifier,
            dilation,
            padding,
            cache: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        dilation: usize,
        w_f: usize,
        num_classes: usize,
        activation: Activation,
        padding: TimePadding,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let kernels = kaiming_uniform(
            rng,
            in_channels * kernel.0 * kernel.1,
            &[out_channels, in_channels, kernel.0, kernel.1],
        );
        let o_w = w_f; // width padding preserves the feature width
        let classifier = LinearClassifier::init(num_classes, out_channels * o_w, activation, rng);
        Self::new(kernels, classifier, dilation, padding)
    }

    fn pad(&self) -> Pad {
        let k_h = self.kernels.value.shape()[2];
        let k_w = self.kernels.value.shape()[3];
        let w_pad = (k_w - 1) / 2;
        match self.padding {
            TimePadding::Symmetric => {
                let h_pad = self.dilation * (k_h - 1) / 2;
                Pad::symmetric(h_pad, w_pad)
            }
            TimePadding::Causal => Pad::causal_time(self.dilation * (k_h - 1), w_pad),
        }
    }

    /// `input` is `[C_in, T, W_f]`; returns predictions `[T, C]`. The dilated
    /// convolution output is flattened per step channel-major
    /// (`feature = k_o * O_w + w`) before the classifier.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let t = input.shape()[1];
        let conv = conv2d_im2col(input, &self.kernels.value, (self.dilation, 1), self.pad())?;
        let (k_o, t_out, o_w) = (conv.shape()[0], conv.shape()[1], conv.shape()[2]);
        debug_assert_eq!(t_out, t);
        let mut flat = Tensor::zeros(&[t, k_o * o_w]);
        for ko in 0..k_o {
            for step in 0..t {
                for x in 0..o_w {
                    flat.set2(step, ko * o_w + x, conv.at3(ko, step, x));
                }
            }
        }
        self.cache = Some(DilatedCache {
            input: input.clone(),
            conv_out_w: o_w,
        });
        self.classifier.forward_matrix(&flat).map_err(ModelError::Layer)
    }

    /// Upstream is `[T, C]` at the classifier output; returns the gradient at
    /// the `[C_in, T, W_f]` input and accumulates parameter gradients.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(ModelError::MissingForward)?;
        let d_flat = self.classifier.backward_matrix(upstream)?;
        let t = cache.input.shape()[1];
        let k_o = self.kernels.value.shape()[0];
        let o_w = cache.conv_out_w;
        let mut d_conv = Tensor::zeros(&[k_o, t, o_w]);
        for ko in 0..k_o {
            for step in 0..t {
                for x in 0..o_w {
                    d_conv.set3(ko, step, x, d_flat.at2(step, ko * o_w + x));
                }
            }
        }
        let (d_in, d_k) = conv2d_backward(
            &cache.input,
            &self.kernels.value,
            (self.dilation, 1),
            self.pad(),
            &d_conv,
        )?;
        self.kernels.grad.scaled_add(1.0, &d_k)?;
        Ok(d_in)
    }
}

impl HasParams for DilatedHead {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}kernels"), &mut self.kernels);
        self.classifier.for_each_param(&format!("{prefix}cls."), f);
    }
}

struct CondCache {
    hprime: Tensor,  // [T, W_f]
    q: Tensor,       // [T, W_f], values after each step's write
    cls_in: Tensor,  // [T, K_o * O_w]
    probs: Tensor,   // [T, C]
    teacher: Option<Tensor>,
}

/// Conditioned time-dilated convolution: the sequential two-channel head.
pub struct ConditionedHead {
    pub kernels: Param, // [K_o, 2, K_h, K_w]
    pub classifier: LinearClassifier,
    pub aff_w: Param, // [W_f, C]
    pub aff_b: Param, // [W_f]
    pub dilation: usize,
    /// Truncate gradient flow at the Q writes (treat fed-back predictions as
    /// constants during backward).
    pub detach_conditioning: bool,
    cache: Option<CondCache>,
}

impl ConditionedHead {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        out_channels: usize,
        kernel: (usize, usize),
        dilation: usize,
        w_f: usize,
        num_classes: usize,
        activation: Activation,
        detach_conditioning: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if kernel.0 % 2 == 0 {
            return Err(ModelError::EvenTimeKernel { k_h: kernel.0 });
        }
        let kernels = kaiming_uniform(
            rng,
            2 * kernel.0 * kernel.1,
            &[out_channels, 2, kernel.0, kernel.1],
        );
        let classifier = LinearClassifier::init(num_classes, out_channels * w_f, activation, rng);
        Ok(Self {
            kernels: Param::new(kernels),
            classifier,
            aff_w: Param::new(kaiming_uniform(rng, num_classes, &[w_f, num_classes])),
            aff_b: Param::new(Tensor::zeros(&[w_f])),
            dilation,
            detach_conditioning,
            cache: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn k_h(&self) -> usize {
        self.kernels.value.shape()[2]
    }

    fn k_w(&self) -> usize {
        self.kernels.value.shape()[3]
    }

    /// The causal dilated window feeding the prediction at step `t`:
    /// rows `{t - dilation*(K_h-1), ..., t - dilation, t}`. Negative rows
    /// read as zero padding.
    pub fn window_rows(t: isize, dilation: usize, k_h: usize) -> Vec<isize> {
        (0..k_h)
            .map(|k| t - (dilation * (k_h - 1 - k)) as isize)
            .collect()
    }

    /// Gather the `[2, K_h, W_f]` window at step `t` from `hprime` and `q`.
    /// `q_valid_below` masks the feedback channel: rows `>= q_valid_below`
    /// read as zero (at step `t` the row `t` of Q has not been written yet).
    fn gather_window(
        &self,
        hprime: &Tensor,
        q: &Tensor,
        t: usize,
        q_valid_below: usize,
    ) -> Tensor {
        let w_f = hprime.shape()[1];
        let k_h = self.k_h();
        let mut win = Tensor::zeros(&[2, k_h, w_f]);
        for (k, row) in Self::window_rows(t as isize, self.dilation, k_h)
            .into_iter()
            .enumerate()
        {
            if row < 0 {
                continue;
            }
            let r = row as usize;
            for x in 0..w_f {
                win.set3(0, k, x, hprime.at2(r, x));
            }
            if r < q_valid_below {
                for x in 0..w_f {
                    win.set3(1, k, x, q.at2(r, x));
                }
            }
        }
        win
    }

    /// Run the sequential conditioned forward over all `T` steps.
    ///
    /// With `teacher` present, the feedback channel embeds the provided
    /// ground-truth rows instead of the model's own predictions.
    pub fn forward(&mut self, hprime: &Tensor, teacher: Option<&Tensor>) -> Result<Tensor> {
        let (t_len, w_f) = (hprime.shape()[0], hprime.shape()[1]);
        if let Some(y) = teacher {
            if y.shape()[0] != t_len || y.shape()[1] != self.num_classes() {
                return Err(ModelError::TeacherShape {
                    expected: (t_len, self.num_classes()),
                    actual: (y.shape()[0], y.shape()[1]),
                });
            }
        }
        let k_o = self.kernels.value.shape()[0];
        let k_w = self.k_w();
        let w_pad = (k_w - 1) / 2;
        let classes = self.num_classes();

        let mut q = Tensor::zeros(&[t_len, w_f]);
        let mut cls_in = Tensor::zeros(&[t_len, k_o * w_f]);
        let mut probs = Tensor::zeros(&[t_len, classes]);

        for t in 0..t_len {
            let win = self.gather_window(hprime, &q, t, t);
            let conv = crate::tensor::conv2d(
                &win,
                &self.kernels.value,
                (1, 1),
                Pad::new(0, 0, w_pad, w_pad),
            )?;
            debug_assert_eq!(conv.shape(), &[k_o, 1, w_f]);
            cls_in.row_mut(t).copy_from_slice(conv.data());
            let mut y_hat = vec![0.0; classes];
            self.classifier.forward_step(cls_in.row(t), &mut y_hat);
            probs.row_mut(t).copy_from_slice(&y_hat);

            // Q[t] <- W . source + b, written after the step's prediction.
            let source: &[f64] = match teacher {
                Some(y) => y.row(t),
                None => &y_hat,
            };
            for j in 0..w_f {
                let w_row = &self.aff_w.value.data()[j * classes..(j + 1) * classes];
                let mut acc = self.aff_b.value.data()[j];
                for (s, w) in source.iter().zip(w_row) {
                    acc += w * s;
                }
                q.set2(t, j, acc);
            }
        }
        self.cache = Some(CondCache {
            hprime: hprime.clone(),
            q,
            cls_in,
            probs: probs.clone(),
            teacher: teacher.cloned(),
        });
        Ok(probs)
    }

    /// Backpropagation through the conditioning chain, in reverse step order.
    /// Gradient arriving at step `t` flows into the kernels and classifier
    /// directly, and into earlier steps through the Q rows their predictions
    /// populated. Returns the gradient at `hprime`.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(ModelError::MissingForward)?;
        let (t_len, w_f) = (cache.hprime.shape()[0], cache.hprime.shape()[1]);
        let k_o = self.kernels.value.shape()[0];
        let k_h = self.k_h();
        let k_w = self.k_w();
        let w_pad = (k_w - 1) / 2;
        let classes = self.num_classes();

        let mut d_hprime = Tensor::zeros(&[t_len, w_f]);
        let mut d_q = Tensor::zeros(&[t_len, w_f]);

        for t in (0..t_len).rev() {
            // Gradient of the Q[t] write: into Aff always, and into the
            // step's own prediction unless conditioning is detached or the
            // write embedded teacher labels (constants).
            let mut d_probs = upstream.row(t).to_vec();
            let dq_row = d_q.row(t).to_vec();
            let source: Vec<f64> = match &cache.teacher {
                Some(y) => y.row(t).to_vec(),
                None => cache.probs.row(t).to_vec(),
            };
            for j in 0..w_f {
                let g = dq_row[j];
                if g == 0.0 {
                    continue;
                }
                self.aff_b.grad.data_mut()[j] += g;
                let w_row = &self.aff_w.value.data()[j * classes..(j + 1) * classes];
                let g_row = &mut self.aff_w.grad.data_mut()[j * classes..(j + 1) * classes];
                for c in 0..classes {
                    g_row[c] += g * source[c];
                    if cache.teacher.is_none() && !self.detach_conditioning {
                        d_probs[c] += g * w_row[c];
                    }
                }
            }

            let mut d_cls_in = vec![0.0; k_o * w_f];
            self.classifier.backward_step(
                cache.cls_in.row(t),
                cache.probs.row(t),
                &d_probs,
                &mut d_cls_in,
            );

            let win = self.gather_window(&cache.hprime, &cache.q, t, t);
            let d_conv = Tensor::from_parts(vec![k_o, 1, w_f], d_cls_in);
            let (d_win, d_k) = conv2d_backward(
                &win,
                &self.kernels.value,
                (1, 1),
                Pad::new(0, 0, w_pad, w_pad),
                &d_conv,
            )?;
            self.kernels.grad.scaled_add(1.0, &d_k)?;

            // Scatter the window gradient back onto H' and Q rows.
            for (k, row) in Self::window_rows(t as isize, self.dilation, k_h)
                .into_iter()
                .enumerate()
            {
                if row < 0 {
                    continue;
                }
                let r = row as usize;
                for x in 0..w_f {
                    d_hprime.data_mut()[r * w_f + x] += d_win.at3(0, k, x);
                }
                // Q[t] read as zero at step t (written after the prediction),
                // so only strictly earlier rows carry gradient.
                if r < t {
                    for x in 0..w_f {
                        d_q.data_mut()[r * w_f + x] += d_win.at3(1, k, x);
                    }
                }
            }
        }
        Ok(d_hprime)
    }
}

impl HasParams for ConditionedHead {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}kernels"), &mut self.kernels);
        self.classifier.for_each_param(&format!("{prefix}cls."), f);
        f(&format!("{prefix}aff_w"), &mut self.aff_w);
        f(&format!("{prefix}aff_b"), &mut self.aff_b);
    }
}
