//! Central finite-difference verification of every backward pass.
//!
//! Each check builds a layer (or model) with seeded random parameters, fixes
//! a random linear projection of the output as a scalar objective, obtains
//! analytic gradients from the backward pass, and compares them against
//! central differences `(f(x+h) - f(x-h)) / 2h` computed through the forward
//! pass alone. The numeric side never touches the backward code it judges.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::layers::{
    Activation, BatchNorm, DepthwiseConv2d, Dropout, LeakyRelu, LinearClassifier, MaxPoolWidth,
    Mode, PointwiseConv2d,
};
use crate::tensor::{Pad, Tensor};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {:>5} grads   max rel err {:.3e}   {}",
            self.name,
            self.checked,
            self.max_rel_err,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute fallback when both values are tiny.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central-difference gradient of `eval` with respect to `n` scalar slots of
/// `state`, addressed through `read`/`write`.
pub fn numeric_grad<S>(
    state: &mut S,
    n: usize,
    read: &dyn Fn(&S, usize) -> f64,
    write: &dyn Fn(&mut S, usize, f64),
    eval: &mut dyn FnMut(&mut S) -> f64,
) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let orig = read(state, i);
            write(state, i, orig + FD_STEP);
            let f_plus = eval(state);
            write(state, i, orig - FD_STEP);
            let f_minus = eval(state);
            write(state, i, orig);
            (f_plus - f_minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Random values bounded away from zero, for layers with a kink at 0.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn report(name: &str, checked: usize, max_rel_err: f64) -> GradCheckReport {
    GradCheckReport {
        name: name.to_string(),
        checked,
        max_rel_err,
        tolerance: FD_TOLERANCE,
    }
}

// ---------------------------------------------------------------------------
// Per-layer checks
// ---------------------------------------------------------------------------

pub fn check_depthwise(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[3, 6, 5]);
    let mut layer = DepthwiseConv2d::init(3, 3, 3, Pad::symmetric(1, 1), &mut rng);
    let proj = random_tensor(&mut rng, &[3, 6, 5]);

    layer.kernels.zero_grad();
    let _ = layer.forward(&input).unwrap();
    let d_in = layer.backward(&proj).unwrap();
    let analytic_k = layer.kernels.grad.data().to_vec();
    let analytic_in = d_in.into_data();

    struct St {
        layer: DepthwiseConv2d,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.layer.forward(&s.input).unwrap(), &proj2);

    let nk = st.layer.kernels.len();
    let num_k = numeric_grad(
        &mut st,
        nk,
        &|s, i| s.layer.kernels.value.data()[i],
        &|s, i, v| s.layer.kernels.value.data_mut()[i] = v,
        &mut eval,
    );
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = max_rel(&analytic_k, &num_k).max(max_rel(&analytic_in, &num_in));
    report("depthwise_conv", nk + ni, err)
}

pub fn check_pointwise(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[4, 3, 5]);
    let mut layer = PointwiseConv2d::init(3, 4, &mut rng);
    let proj = random_tensor(&mut rng, &[3, 3, 5]);

    layer.weights.zero_grad();
    let _ = layer.forward(&input).unwrap();
    let d_in = layer.backward(&proj).unwrap();
    let analytic_w = layer.weights.grad.data().to_vec();
    let analytic_in = d_in.into_data();

    struct St {
        layer: PointwiseConv2d,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.layer.forward(&s.input).unwrap(), &proj2);

    let nw = st.layer.weights.len();
    let num_w = numeric_grad(
        &mut st,
        nw,
        &|s, i| s.layer.weights.value.data()[i],
        &|s, i, v| s.layer.weights.value.data_mut()[i] = v,
        &mut eval,
    );
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = max_rel(&analytic_w, &num_w).max(max_rel(&analytic_in, &num_in));
    report("pointwise_conv", nw + ni, err)
}

pub fn check_lrelu(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor_off_kink(&mut rng, &[2, 4, 4]);
    let proj = random_tensor(&mut rng, &[2, 4, 4]);
    let mut layer = LeakyRelu::new(0.01);

    let _ = layer.forward(&input);
    let analytic_in = layer.backward(&proj).unwrap().into_data();

    struct St {
        layer: LeakyRelu,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.layer.forward(&s.input), &proj2);
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    report("lrelu", ni, max_rel(&analytic_in, &num_in))
}

pub fn check_batchnorm(seed: u64, mode: Mode) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[2, 3, 4, 2]);
    let proj = random_tensor(&mut rng, &[2, 3, 4, 2]);
    let mut layer = BatchNorm::new(3);
    layer.set_mode(mode);
    // Non-trivial affine and running stats.
    for i in 0..3 {
        layer.gamma.value.data_mut()[i] = 0.5 + i as f64 * 0.4;
        layer.beta.value.data_mut()[i] = -0.2 + i as f64 * 0.1;
        layer.running_mean.data_mut()[i] = 0.1 * i as f64;
        layer.running_var.data_mut()[i] = 0.5 + 0.3 * i as f64;
    }

    layer.gamma.zero_grad();
    layer.beta.zero_grad();
    let _ = layer.forward(&input).unwrap();
    let d_in = layer.backward(&proj).unwrap();
    let analytic_g = layer.gamma.grad.data().to_vec();
    let analytic_b = layer.beta.grad.data().to_vec();
    let analytic_in = d_in.into_data();

    struct St {
        layer: BatchNorm,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    // Running-stat drift across re-evaluations does not change train-mode
    // output (batch statistics are used) and infer-mode never updates them.
    let mut eval = move |s: &mut St| dot(&s.layer.forward(&s.input).unwrap(), &proj2);

    let num_g = numeric_grad(
        &mut st,
        3,
        &|s, i| s.layer.gamma.value.data()[i],
        &|s, i, v| s.layer.gamma.value.data_mut()[i] = v,
        &mut eval,
    );
    let num_b = numeric_grad(
        &mut st,
        3,
        &|s, i| s.layer.beta.value.data()[i],
        &|s, i, v| s.layer.beta.value.data_mut()[i] = v,
        &mut eval,
    );
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = max_rel(&analytic_g, &num_g)
        .max(max_rel(&analytic_b, &num_b))
        .max(max_rel(&analytic_in, &num_in));
    let name = match mode {
        Mode::Train => "batchnorm (train)",
        Mode::Infer => "batchnorm (infer)",
    };
    report(name, 6 + ni, err)
}

pub fn check_maxpool(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Values spread far enough apart that FD never flips an argmax.
    let n = 2 * 3 * 8;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
    for i in 0..n {
        let j = rng.gen_range(0..n);
        vals.swap(i, j);
    }
    let input = Tensor::from_parts(vec![2, 3, 8], vals);
    let proj = random_tensor(&mut rng, &[2, 3, 4]);
    let mut layer = MaxPoolWidth::new(2);

    let _ = layer.forward(&input).unwrap();
    let analytic_in = layer.backward(&proj).unwrap().into_data();

    struct St {
        layer: MaxPoolWidth,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.layer.forward(&s.input).unwrap(), &proj2);
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    report("maxpool", ni, max_rel(&analytic_in, &num_in))
}

pub fn check_dropout(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[2, 4, 4]);
    let proj = random_tensor(&mut rng, &[2, 4, 4]);
    let mut layer = Dropout::new(0.25).unwrap();

    // The mask must be identical on every re-evaluation: reseed per forward.
    let mask_seed = seed ^ 0xD509;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let _ = layer.forward(&input, &mut mask_rng);
    let analytic_in = layer.backward(&proj).unwrap().into_data();

    struct St {
        layer: Dropout,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        dot(&s.layer.forward(&s.input, &mut r), &proj2)
    };
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    report("dropout", ni, max_rel(&analytic_in, &num_in))
}

pub fn check_classifier(seed: u64, activation: Activation) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[5, 6]); // T=5 steps, 6 features
    let mut layer = LinearClassifier::init(4, 6, activation, &mut rng);
    let proj = random_tensor(&mut rng, &[5, 4]);

    layer.weights.zero_grad();
    layer.bias.zero_grad();
    let _ = layer.forward_matrix(&input).unwrap();
    let d_in = layer.backward_matrix(&proj).unwrap();
    let analytic_w = layer.weights.grad.data().to_vec();
    let analytic_b = layer.bias.grad.data().to_vec();
    let analytic_in = d_in.into_data();

    struct St {
        layer: LinearClassifier,
        input: Tensor,
    }
    let mut st = St { layer, input };
    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.layer.forward_matrix(&s.input).unwrap(), &proj2);

    let nw = st.layer.weights.len();
    let num_w = numeric_grad(
        &mut st,
        nw,
        &|s, i| s.layer.weights.value.data()[i],
        &|s, i, v| s.layer.weights.value.data_mut()[i] = v,
        &mut eval,
    );
    let nb = st.layer.bias.len();
    let num_b = numeric_grad(
        &mut st,
        nb,
        &|s, i| s.layer.bias.value.data()[i],
        &|s, i, v| s.layer.bias.value.data_mut()[i] = v,
        &mut eval,
    );
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = max_rel(&analytic_w, &num_w)
        .max(max_rel(&analytic_b, &num_b))
        .max(max_rel(&analytic_in, &num_in));
    let name = match activation {
        Activation::Sigmoid => "classifier (sigmoid)",
        Activation::Softmax => "classifier (softmax)",
    };
    report(name, nw + nb + ni, err)
}

// ---------------------------------------------------------------------------
// Head and model checks
// ---------------------------------------------------------------------------

/// Finite differences over every parameter reached via `HasParams` (filtered
/// by `keep`), against analytic gradients already accumulated in the grad
/// slots.
fn fd_params_vs_analytic<S: crate::layers::HasParams>(
    state: &mut S,
    eval: &mut dyn FnMut(&mut S) -> f64,
    keep: &dyn Fn(&str) -> bool,
) -> (usize, f64) {
    let mut names: Vec<String> = Vec::new();
    state.for_each_param("", &mut |name, _| {
        if keep(name) {
            names.push(name.to_string());
        }
    });
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for name in names {
        let (n, analytic) = {
            let mut len = 0;
            let mut grad = Vec::new();
            state.for_each_param("", &mut |pn, p| {
                if pn == name {
                    len = p.len();
                    grad = p.grad.data().to_vec();
                }
            });
            (len, grad)
        };
        for i in 0..n {
            let read = |s: &mut S| {
                let mut v = 0.0;
                s.for_each_param("", &mut |pn, p| {
                    if pn == name {
                        v = p.value.data()[i];
                    }
                });
                v
            };
            let write = |s: &mut S, v: f64| {
                s.for_each_param("", &mut |pn, p| {
                    if pn == name {
                        p.value.data_mut()[i] = v;
                    }
                });
            };
            let orig = read(state);
            write(state, orig + FD_STEP);
            let f_plus = eval(state);
            write(state, orig - FD_STEP);
            let f_minus = eval(state);
            write(state, orig);
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
            checked += 1;
        }
    }
    (checked, worst)
}

pub fn check_dilated_head(seed: u64, padding: crate::model::TimePadding) -> GradCheckReport {
    use crate::model::{DilatedHead, TimePadding};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, w_f, classes) = (10usize, 5usize, 3usize);
    let head = DilatedHead::init(
        1,
        2,
        (3, 3),
        2,
        w_f,
        classes,
        Activation::Sigmoid,
        padding,
        &mut rng,
    )
    .unwrap();
    let input = random_tensor(&mut rng, &[1, t_len, w_f]);
    let proj = random_tensor(&mut rng, &[t_len, classes]);

    struct St {
        head: DilatedHead,
        input: Tensor,
    }
    impl crate::layers::HasParams for St {
        fn for_each_param(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(&str, &mut crate::layers::Param),
        ) {
            self.head.for_each_param(prefix, f);
        }
    }
    let mut st = St { head, input };
    let _ = st.head.forward(&st.input).unwrap();
    let d_in = st.head.backward(&proj).unwrap();
    let analytic_in = d_in.into_data();

    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.head.forward(&s.input).unwrap(), &proj2);
    let (checked_p, err_p) = fd_params_vs_analytic(&mut st, &mut eval, &|_| true);
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = err_p.max(max_rel(&analytic_in, &num_in));
    let name = match padding {
        TimePadding::Symmetric => "dilated head (symmetric)",
        TimePadding::Causal => "dilated head (causal)",
    };
    report(name, checked_p + ni, err)
}

/// The conditioned head at the micro scale: T=12, W_f=6, C=3, K'_h=3,
/// dilation 2, two output kernels. Exercises backpropagation through the
/// full conditioning chain, prediction feedback included.
pub fn check_cdcnn_micro(seed: u64) -> GradCheckReport {
    use crate::model::ConditionedHead;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, w_f, classes) = (12usize, 6usize, 3usize);
    let head = ConditionedHead::init(
        2,
        (3, 3),
        2,
        w_f,
        classes,
        Activation::Sigmoid,
        false,
        &mut rng,
    )
    .unwrap();
    let input = random_tensor(&mut rng, &[t_len, w_f]);
    let proj = random_tensor(&mut rng, &[t_len, classes]);

    struct St {
        head: ConditionedHead,
        input: Tensor,
    }
    impl crate::layers::HasParams for St {
        fn for_each_param(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(&str, &mut crate::layers::Param),
        ) {
            self.head.for_each_param(prefix, f);
        }
    }
    let mut st = St { head, input };
    let _ = st.head.forward(&st.input, None).unwrap();
    let d_in = st.head.backward(&proj).unwrap();
    let analytic_in = d_in.into_data();

    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| dot(&s.head.forward(&s.input, None).unwrap(), &proj2);
    let (checked_p, err_p) = fd_params_vs_analytic(&mut st, &mut eval, &|_| true);
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = err_p.max(max_rel(&analytic_in, &num_in));
    report("cdcnn micro (free-running)", checked_p + ni, err)
}

/// Teacher-forced variant: the feedback rows are constants, so the chain
/// gradient reduces to the per-step paths plus the affine parameters.
pub fn check_cdcnn_micro_teacher(seed: u64) -> GradCheckReport {
    use crate::model::ConditionedHead;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, w_f, classes) = (12usize, 6usize, 3usize);
    let head = ConditionedHead::init(
        2,
        (3, 3),
        2,
        w_f,
        classes,
        Activation::Sigmoid,
        false,
        &mut rng,
    )
    .unwrap();
    let input = random_tensor(&mut rng, &[t_len, w_f]);
    let proj = random_tensor(&mut rng, &[t_len, classes]);
    let mut labels = Tensor::zeros(&[t_len, classes]);
    for t in 0..t_len {
        labels.set2(t, t % classes, 1.0);
    }

    struct St {
        head: ConditionedHead,
        input: Tensor,
        labels: Tensor,
    }
    impl crate::layers::HasParams for St {
        fn for_each_param(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(&str, &mut crate::layers::Param),
        ) {
            self.head.for_each_param(prefix, f);
        }
    }
    let mut st = St {
        head,
        input,
        labels,
    };
    let _ = st.head.forward(&st.input, Some(&st.labels)).unwrap();
    let d_in = st.head.backward(&proj).unwrap();
    let analytic_in = d_in.into_data();

    let proj2 = proj.clone();
    let mut eval = move |s: &mut St| {
        let labels = s.labels.clone();
        dot(&s.head.forward(&s.input, Some(&labels)).unwrap(), &proj2)
    };
    let (checked_p, err_p) = fd_params_vs_analytic(&mut st, &mut eval, &|_| true);
    let ni = st.input.len();
    let num_in = numeric_grad(
        &mut st,
        ni,
        &|s, i| s.input.data()[i],
        &|s, i, v| s.input.data_mut()[i] = v,
        &mut eval,
    );
    let err = err_p.max(max_rel(&analytic_in, &num_in));
    report("cdcnn micro (teacher-forced)", checked_p + ni, err)
}

/// End to end: full model (DWS stack plus conditioned head) through the
/// binary cross-entropy loss, in training mode with a fixed dropout stream.
pub fn check_model_end_to_end(seed: u64) -> GradCheckReport {
    use crate::model::{Model, ModelConfig};
    use crate::optim::bce_loss_masked;

    let config = ModelConfig {
        blocks: 1,
        channels: vec![3],
        depthwise_kernel: (3, 3),
        pool_widths: vec![2],
        dropout_p: 0.2,
        lrelu_beta: 0.01,
        cdcnn_kernel: (3, 3),
        cdcnn_out_channels: 2,
        dilation: 2,
        num_classes: 3,
        num_features: 8,
        conditioning: true,
        teacher_forcing: false,
        detach_conditioning: false,
        classifier_activation: Activation::Sigmoid,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = 12;
    let features = random_tensor(&mut rng, &[t_len, config.num_features]);
    let mut labels = Tensor::zeros(&[t_len, config.num_classes]);
    for t in 0..t_len {
        if rng.gen::<bool>() {
            labels.set2(t, rng.gen_range(0..config.num_classes), 1.0);
        }
    }
    let dropout_seed = seed ^ 0xABCD;

    struct St {
        model: Model,
        features: Tensor,
        labels: Tensor,
        dropout_seed: u64,
    }
    impl crate::layers::HasParams for St {
        fn for_each_param(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(&str, &mut crate::layers::Param),
        ) {
            self.model.for_each_param(prefix, f);
        }
    }
    let mut st = St {
        model: Model::new(config, seed).unwrap(),
        features,
        labels,
        dropout_seed,
    };

    let mut eval = |s: &mut St| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(s.dropout_seed);
        let pred = s.model.forward(&s.features, None, &mut drop_rng).unwrap();
        let t = s.features.shape()[0];
        bce_loss_masked(&pred, &s.labels, t).unwrap().0
    };

    // Analytic pass.
    st.model.zero_grad();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let pred = st
        .model
        .forward(&st.features, None, &mut drop_rng)
        .unwrap();
    let (_, d_pred) = bce_loss_masked(&pred, &st.labels, t_len).unwrap();
    let _ = st.model.backward(&d_pred).unwrap();

    let (checked, err) = fd_params_vs_analytic(&mut st, &mut eval, &|_| true);
    report("model end-to-end (bce)", checked, err)
}

/// Run every per-layer check with one seed.
pub fn run_layer_suite(seed: u64) -> Vec<GradCheckReport> {
    vec![
        check_depthwise(seed),
        check_pointwise(seed),
        check_lrelu(seed),
        check_batchnorm(seed, Mode::Train),
        check_batchnorm(seed, Mode::Infer),
        check_maxpool(seed),
        check_dropout(seed),
        check_classifier(seed, Activation::Sigmoid),
        check_classifier(seed, Activation::Softmax),
    ]
}

/// Layer checks plus the head and micro-model checks.
pub fn run_full_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = run_layer_suite(seed);
    reports.push(check_dilated_head(seed, crate::model::TimePadding::Symmetric));
    reports.push(check_dilated_head(seed, crate::model::TimePadding::Causal));
    reports.push(check_cdcnn_micro(seed));
    reports.push(check_cdcnn_micro_teacher(seed));
    reports.push(check_model_end_to_end(seed));
    reports
}
