//! Full model assembly: the DWS block stack feeding either the plain
//! time-dilated head or the conditioned one, plus parameter counting and
//! checkpoint serialization.

mod checkpoint;
mod dws;
mod head;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dws::{DwsBlock, DwsStack};
pub use head::{ConditionedHead, DilatedHead, TimePadding};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{Activation, HasParams, LayerError, Mode, Param};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("time kernel height must be odd, got {k_h}")]
    EvenTimeKernel { k_h: usize },
    #[error("teacher labels must be [{}x{}], got [{}x{}]", expected.0, expected.1, actual.0, actual.1)]
    TeacherShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("backward called without a cached forward pass")]
    MissingForward,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// All architectural hyper-parameters of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of DWS blocks (L).
    pub blocks: usize,
    /// Output channels per block, length L.
    pub channels: Vec<usize>,
    /// Depthwise kernel (height, width); both odd so padding preserves shape.
    pub depthwise_kernel: (usize, usize),
    /// Max-pool width per block, length L; their product must divide `num_features`.
    pub pool_widths: Vec<usize>,
    pub dropout_p: f64,
    pub lrelu_beta: f64,
    /// Dilated head kernel (height, width); both odd.
    pub cdcnn_kernel: (usize, usize),
    /// Output channels of the dilated head (K'_o).
    pub cdcnn_out_channels: usize,
    /// Time dilation factor (>= 1).
    pub dilation: usize,
    /// Number of sound event classes (C).
    pub num_classes: usize,
    /// Input feature count per frame (F).
    pub num_features: usize,
    /// Conditioned head when true, plain dilated baseline when false.
    pub conditioning: bool,
    /// Feed ground-truth labels (not predictions) to the conditioning affine.
    pub teacher_forcing: bool,
    /// Truncate gradients at the Q writes.
    pub detach_conditioning: bool,
    pub classifier_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            channels: vec![256, 256, 256],
            depthwise_kernel: (5, 5),
            pool_widths: vec![5, 4, 2],
            dropout_p: 0.25,
            lrelu_beta: 1e-2,
            cdcnn_kernel: (7, 7),
            cdcnn_out_channels: 256,
            dilation: 10,
            num_classes: 16,
            num_features: 40,
            conditioning: true,
            teacher_forcing: false,
            detach_conditioning: false,
            classifier_activation: Activation::Sigmoid,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(ModelError::Config("blocks must be >= 1".into()));
        }
        if self.channels.len() != self.blocks {
            return Err(ModelError::Config(format!(
                "channels has {} entries, expected {}",
                self.channels.len(),
                self.blocks
            )));
        }
        if self.pool_widths.len() != self.blocks {
            return Err(ModelError::Config(format!(
                "pool_widths has {} entries, expected {}",
                self.pool_widths.len(),
                self.blocks
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("channels must be positive".into()));
        }
        let pool_product: usize = self.pool_widths.iter().product();
        if pool_product == 0 || self.num_features % pool_product != 0 {
            return Err(ModelError::Config(format!(
                "pool width product {} must divide the feature count {}",
                pool_product, self.num_features
            )));
        }
        if self.depthwise_kernel.0 % 2 == 0 || self.depthwise_kernel.1 % 2 == 0 {
            return Err(ModelError::Config(format!(
                "depthwise kernel {:?} must be odd in both axes",
                self.depthwise_kernel
            )));
        }
        if self.cdcnn_kernel.0 % 2 == 0 || self.cdcnn_kernel.1 % 2 == 0 {
            return Err(ModelError::Config(format!(
                "dilated head kernel {:?} must be odd in both axes",
                self.cdcnn_kernel
            )));
        }
        if self.dilation == 0 {
            return Err(ModelError::Config("dilation must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(0.0..1.0).contains(&self.lrelu_beta) {
            return Err(ModelError::Config(format!(
                "lrelu_beta {} outside [0, 1)",
                self.lrelu_beta
            )));
        }
        if self.num_classes == 0 || self.num_features == 0 || self.cdcnn_out_channels == 0 {
            return Err(ModelError::Config(
                "num_classes, num_features, cdcnn_out_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Feature width after the stack's pooling chain.
    pub fn pooled_width(&self) -> usize {
        self.num_features / self.pool_widths.iter().product::<usize>()
    }

    /// Width of the sequence matrix H' = C_L * W_L.
    pub fn w_f(&self) -> usize {
        self.channels[self.blocks - 1] * self.pooled_width()
    }

    /// Classifier input size: K'_o * O_w with O_w = W_f.
    pub fn classifier_features(&self) -> usize {
        self.cdcnn_out_channels * self.w_f()
    }
}

/// Head variant selected by `ModelConfig::conditioning`.
pub enum Head {
    Dilated(DilatedHead),
    Conditioned(ConditionedHead),
}

/// The full network: DWS stack plus head.
pub struct Model {
    pub config: ModelConfig,
    pub dws: DwsStack,
    pub head: Head,
    mode: Mode,
}

impl Model {
    /// Build a model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dws = DwsStack::init(
            &config.channels,
            config.depthwise_kernel,
            &config.pool_widths,
            config.dropout_p,
            config.lrelu_beta,
            &mut rng,
        )?;
        let head = if config.conditioning {
            Head::Conditioned(ConditionedHead::init(
                config.cdcnn_out_channels,
                config.cdcnn_kernel,
                config.dilation,
                config.w_f(),
                config.num_classes,
                config.classifier_activation,
                config.detach_conditioning,
                &mut rng,
            )?)
        } else {
            Head::Dilated(DilatedHead::init(
                1,
                config.cdcnn_out_channels,
                config.cdcnn_kernel,
                config.dilation,
                config.w_f(),
                config.num_classes,
                config.classifier_activation,
                TimePadding::Symmetric,
                &mut rng,
            )?)
        };
        Ok(Self {
            config,
            dws,
            head,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.dws.set_mode(mode);
    }

    /// Forward over one sequence. `features` is `[T, F]`; returns `[T, C]`.
    /// `teacher` supplies ground-truth rows for teacher-forced conditioning
    /// and is ignored (with an error) unless the config enables it.
    pub fn forward(
        &mut self,
        features: &Tensor,
        teacher: Option<&Tensor>,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let (t, f) = (features.shape()[0], features.shape()[1]);
        if f != self.config.num_features {
            return Err(ModelError::Config(format!(
                "input has {} features per frame, model expects {}",
                f, self.config.num_features
            )));
        }
        let x = Tensor::from_parts(vec![1, t, f], features.data().to_vec());
        let hprime = self.dws.forward(&x, rng)?;
        match &mut self.head {
            Head::Dilated(head) => {
                let w_f = hprime.shape()[1];
                let stacked = Tensor::from_parts(vec![1, t, w_f], hprime.into_data());
                head.forward(&stacked)
            }
            Head::Conditioned(head) => {
                let fed = if self.config.teacher_forcing { teacher } else { None };
                head.forward(&hprime, fed)
            }
        }
    }

    /// Backward from the prediction gradient `[T, C]`. Accumulates parameter
    /// gradients; returns the gradient at the `[T, F]` input features.
    pub fn backward(&mut self, d_probs: &Tensor) -> Result<Tensor> {
        let d_hprime = match &mut self.head {
            Head::Dilated(head) => {
                let d = head.backward(d_probs)?;
                let (t, w_f) = (d.shape()[1], d.shape()[2]);
                Tensor::from_parts(vec![t, w_f], d.into_data())
            }
            Head::Conditioned(head) => head.backward(d_probs)?,
        };
        let d_x = self.dws.backward(&d_hprime)?;
        let (t, f) = (d_x.shape()[1], d_x.shape()[2]);
        Ok(Tensor::from_parts(vec![t, f], d_x.into_data()))
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param("", &mut |_, p| p.zero_grad());
    }

    /// Total trainable parameter count, measured from the live tensors.
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, p| n += p.len());
        n
    }

    /// Mutable visitation over non-trainable state (BN running statistics).
    pub fn for_each_buffer(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.dws.for_each_buffer("dws.", f);
    }
}

impl HasParams for Model {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.dws.for_each_param(&format!("{prefix}dws."), f);
        match &mut self.head {
            Head::Dilated(h) => h.for_each_param(&format!("{prefix}head."), f),
            Head::Conditioned(h) => h.for_each_param(&format!("{prefix}head."), f),
        }
    }
}

/// Exact integer parameter counts per component, with the depthwise separable
/// vs standard convolution comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub components: Vec<(String, usize)>,
    pub total: usize,
    /// Conv-kernel params of the DWS factorization (bias-free).
    pub dws_conv_params: u64,
    /// Conv-kernel params of matched standard convolutions (bias-free).
    pub standard_conv_params: u64,
    /// dws_conv_params / standard_conv_params.
    pub ratio: f64,
}

/// Bias-free parameter counts for one DWS layer vs the standard convolution
/// of the same shape: depthwise `C_in*K_h*K_w` plus pointwise `C_out*C_in`,
/// against `C_out*C_in*K_h*K_w`. The ratio reduces to
/// `1/C_out + 1/(K_h*K_w)` for every shape.
pub fn dws_vs_standard(c_in: usize, c_out: usize, k_h: usize, k_w: usize) -> (u64, u64) {
    let dws = (c_in * k_h * k_w + c_out * c_in) as u64;
    let standard = (c_out * c_in * k_h * k_w) as u64;
    (dws, standard)
}

pub fn param_count(config: &ModelConfig) -> Result<ParamCountReport> {
    config.validate()?;
    let (k_h, k_w) = config.depthwise_kernel;
    let mut components = Vec::new();
    let mut dws_conv: u64 = 0;
    let mut standard_conv: u64 = 0;
    let mut c_in = 1usize;
    for (l, &c_out) in config.channels.iter().enumerate() {
        let depthwise = c_in * k_h * k_w;
        let pointwise = c_out * c_in;
        let bn = 2 * c_in + 2 * c_out;
        components.push((format!("dws.{l}.depthwise"), depthwise));
        components.push((format!("dws.{l}.pointwise"), pointwise));
        components.push((format!("dws.{l}.batchnorm"), bn));
        let (d, s) = dws_vs_standard(c_in, c_out, k_h, k_w);
        dws_conv += d;
        standard_conv += s;
        c_in = c_out;
    }
    let head_in_channels = if config.conditioning { 2 } else { 1 };
    let head_kernels =
        config.cdcnn_out_channels * head_in_channels * config.cdcnn_kernel.0 * config.cdcnn_kernel.1;
    components.push(("head.kernels".into(), head_kernels));
    let cls = config.classifier_features() * config.num_classes + config.num_classes;
    components.push(("head.classifier".into(), cls));
    if config.conditioning {
        let aff = config.w_f() * config.num_classes + config.w_f();
        components.push(("head.affine".into(), aff));
    }
    let total = components.iter().map(|(_, n)| n).sum();
    Ok(ParamCountReport {
        components,
        total,
        dws_conv_params: dws_conv,
        standard_conv_params: standard_conv,
        ratio: dws_conv as f64 / standard_conv as f64,
    })
}
