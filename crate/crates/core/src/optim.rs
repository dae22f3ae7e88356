//! Losses, the Adam optimizer, early stopping, and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SequenceItem, Split};
use crate::layers::{Activation, HasParams, Mode};
use crate::model::{Checkpoint, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label value {0} is not 0 or 1")]
    LabelNotBinary(f64),
    #[error("prediction/target shape mismatch: {pred:?} vs {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite {what} in epoch {epoch}: training aborted")]
    NonFiniteLoss { what: &'static str, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Clamp bound for predicted probabilities inside the log losses.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy, averaged over the counted elements of `[T, C]`
/// (rows past `valid_rows` are excluded). Returns the loss and its gradient
/// with respect to the predictions.
pub fn bce_loss_masked(
    pred: &Tensor,
    target: &Tensor,
    valid_rows: usize,
) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let c = pred.shape()[1];
    let count = (valid_rows * c) as f64;
    let mut loss = 0.0;
    let mut grad = pred.zeros_like();
    for t in 0..valid_rows {
        for j in 0..c {
            let y = target.at2(t, j);
            if y != 0.0 && y != 1.0 {
                return Err(TrainError::LabelNotBinary(y));
            }
            let p = clamp(pred.at2(t, j));
            loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            grad.set2(t, j, (-(y / p) + (1.0 - y) / (1.0 - p)) / count);
        }
    }
    Ok((loss / count, grad))
}

/// Binary cross-entropy over every element.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    bce_loss_masked(pred, target, pred.shape()[0])
}

/// Categorical cross-entropy with one-hot rows, averaged over the counted
/// rows. Pairs with the softmax classifier option.
pub fn categorical_ce_loss_masked(
    pred: &Tensor,
    target: &Tensor,
    valid_rows: usize,
) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let c = pred.shape()[1];
    let rows = valid_rows as f64;
    let mut loss = 0.0;
    let mut grad = pred.zeros_like();
    for t in 0..valid_rows {
        for j in 0..c {
            let y = target.at2(t, j);
            if y != 0.0 && y != 1.0 {
                return Err(TrainError::LabelNotBinary(y));
            }
            if y == 1.0 {
                let p = clamp(pred.at2(t, j));
                loss += -p.ln();
                grad.set2(t, j, -1.0 / (p * rows));
            }
        }
    }
    Ok((loss / rows, grad))
}

pub fn categorical_ce_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    categorical_ce_loss_masked(pred, target, pred.shape()[0])
}

/// Loss matching the classifier activation: sigmoid pairs with binary
/// cross-entropy, softmax with categorical cross-entropy.
pub fn loss_for_activation(
    activation: Activation,
    pred: &Tensor,
    target: &Tensor,
    valid_rows: usize,
) -> Result<(f64, Tensor)> {
    match activation {
        Activation::Sigmoid => bce_loss_masked(pred, target, valid_rows),
        Activation::Softmax => categorical_ce_loss_masked(pred, target, valid_rows),
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments, keyed by parameter name.
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter's accumulated gradient. The step
    /// counter increments before the bias correction.
    pub fn apply(&mut self, target: &mut dyn HasParams) {
        self.step += 1;
        let t = self.step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);
        let moments = &mut self.moments;
        target.for_each_param("", &mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (p.grad.zeros_like(), p.grad.zeros_like()));
            for i in 0..p.grad.len() {
                let g = p.grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Stops when the validation loss has not strictly improved for `patience`
/// consecutive epochs; remembers which epoch was best.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    /// Record one epoch's validation loss; returns true on a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            true
        } else {
            self.epochs_since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.patience
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            patience: 30,
            max_epochs: 10_000,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time: f64,
    pub seed: u64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
}

/// Mean loss over a set of items without touching gradients or parameters.
/// Runs in inference mode; restores the model's previous mode.
pub fn eval_loss(model: &mut Model, items: &[&SequenceItem]) -> Result<f64> {
    let prev = model.mode();
    model.set_mode(Mode::Infer);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout is inert in inference
    let mut total = 0.0;
    for item in items {
        let pred = model.forward(&item.features, None, &mut rng)?;
        let (loss, _) = loss_for_activation(
            model.config.classifier_activation,
            &pred,
            &item.labels,
            item.valid_len,
        )?;
        total += loss;
    }
    model.set_mode(prev);
    Ok(total / items.len() as f64)
}

/// Full training protocol: shuffled minibatches, Adam updates, per-epoch
/// validation, early stopping on the validation loss, and retention of the
/// best-validation checkpoint. Deterministic given (seed, config, dataset).
pub fn train(
    model: &mut Model,
    train_items: &[&SequenceItem],
    val_items: &[&SequenceItem],
    config: &TrainConfig,
    extra_checkpoint_tensors: &BTreeMap<String, Tensor>,
) -> Result<TrainOutcome> {
    if train_items.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val_items.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let started = std::time::Instant::now();
    let mut adam = AdamState::new(config.adam);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;

    let teacher = model.config.teacher_forcing;
    let activation = model.config.classifier_activation;

    for epoch in 1..=config.max_epochs {
        model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let item = train_items[idx];
                // Per-item dropout stream, derived from the epoch RNG so the
                // whole schedule is reproducible.
                let mut item_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
                let labels = teacher.then_some(&item.labels);
                let pred = model.forward(&item.features, labels, &mut item_rng)?;
                let (loss, mut d_pred) =
                    loss_for_activation(activation, &pred, &item.labels, item.valid_len)?;
                batch_loss += loss;
                // Average the gradient over the batch.
                d_pred.scale(1.0 / batch.len() as f64);
                let _ = model.backward(&d_pred)?;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    what: "training loss",
                    epoch,
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            adam.apply(model);
        }
        let train_loss = epoch_loss / train_items.len() as f64;

        let val_loss = eval_loss(model, val_items)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                what: "validation loss",
                epoch,
            });
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_time: started.elapsed().as_secs_f64(),
            seed: config.seed,
        });
        if stopper.observe(epoch, val_loss) {
            best = Some(Checkpoint::from_model(model, extra_checkpoint_tensors));
        }
        if stopper.should_stop() {
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        log,
    })
}

/// Pool frame counts over items with predictions from an arbitrary source.
pub fn evaluate_items<F>(
    items: &[&SequenceItem],
    threshold: f64,
    mut predict: F,
) -> Result<crate::metrics::EvalReport>
where
    F: FnMut(&SequenceItem) -> Result<Tensor>,
{
    let mut counts = crate::metrics::FrameCounts::default();
    for item in items {
        let pred = predict(item)?;
        counts
            .add(&pred, &item.labels, threshold, item.valid_len)
            .map_err(TrainError::Metrics)?;
    }
    counts.finish(threshold).map_err(TrainError::Metrics)
}

/// Evaluate a model over items in inference mode (free-running conditioning).
pub fn evaluate_model(
    model: &mut Model,
    items: &[&SequenceItem],
    threshold: f64,
) -> Result<crate::metrics::EvalReport> {
    let prev = model.mode();
    model.set_mode(Mode::Infer);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let report = evaluate_items(items, threshold, |item| {
        Ok(model.forward(&item.features, None, &mut rng)?)
    });
    model.set_mode(prev);
    report
}

/// Render epoch records as newline-delimited JSON.
pub fn log_to_ndjson(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::layers::Param;
    use crate::model::{Model, ModelConfig};
    use rand::Rng;

    struct SoloParam(Param);
    impl HasParams for SoloParam {
        fn for_each_param(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("x", &mut self.0);
        }
    }

    fn micro_model_config() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            channels: vec![3],
            depthwise_kernel: (3, 3),
            pool_widths: vec![2],
            dropout_p: 0.1,
            lrelu_beta: 0.01,
            cdcnn_kernel: (3, 3),
            cdcnn_out_channels: 2,
            dilation: 2,
            num_classes: 4,
            num_features: 8,
            conditioning: true,
            teacher_forcing: false,
            detach_conditioning: false,
            classifier_activation: Activation::Sigmoid,
        }
    }

    // -- losses -------------------------------------------------------------

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _) = bce_loss(&y, &y).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn bce_half_everywhere_is_ln2() {
        let pred = Tensor::full(&[4, 4], 0.5);
        let target = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| (i % 2) as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let (loss, _) = bce_loss(&pred, &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() <= 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let pred = Tensor::full(&[1, 2], 0.5);
        let target = Tensor::new(vec![1, 2], vec![0.3, 1.0]).unwrap();
        assert!(matches!(
            bce_loss(&pred, &target),
            Err(TrainError::LabelNotBinary(_))
        ));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let n = 3;
            let c = 4;
            let pred = Tensor::from_parts(
                vec![n, c],
                (0..n * c).map(|_| rng.gen_range(0.1..0.9)).collect(),
            );
            let target = Tensor::from_parts(
                vec![n, c],
                (0..n * c).map(|_| f64::from(rng.gen::<bool>())).collect(),
            );
            let (_, grad) = bce_loss(&pred, &target).unwrap();
            let h = 1e-7;
            for i in 0..pred.len() {
                let mut plus = pred.clone();
                plus.data_mut()[i] += h;
                let mut minus = pred.clone();
                minus.data_mut()[i] -= h;
                let num = (bce_loss(&plus, &target).unwrap().0
                    - bce_loss(&minus, &target).unwrap().0)
                    / (2.0 * h);
                let a = grad.data()[i];
                assert!(
                    (a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0),
                    "grad[{i}] {a} vs {num}"
                );
            }
        }
    }

    #[test]
    fn bce_mask_excludes_padding_rows() {
        let pred = Tensor::full(&[4, 2], 0.5);
        let mut target = Tensor::zeros(&[4, 2]);
        target.set2(3, 0, 1.0); // only in the masked region
        let (full, _) = bce_loss(&pred, &target).unwrap();
        let (masked, grad) = bce_loss_masked(&pred, &target, 2).unwrap();
        assert!((masked - std::f64::consts::LN_2).abs() <= 1e-12);
        assert!(full > 0.0);
        // No gradient beyond the valid rows.
        for t in 2..4 {
            assert!(grad.row(t).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn cce_uniform_over_16_is_ln16() {
        let pred = Tensor::full(&[5, 16], 1.0 / 16.0);
        let mut target = Tensor::zeros(&[5, 16]);
        for t in 0..5 {
            target.set2(t, t * 3 % 16, 1.0);
        }
        let (loss, _) = categorical_ce_loss(&pred, &target).unwrap();
        assert!((loss - 16f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn cce_one_hot_match_is_tiny() {
        let mut pred = Tensor::full(&[3, 4], PROB_CLAMP);
        let mut target = Tensor::zeros(&[3, 4]);
        for t in 0..3 {
            pred.set2(t, t, 1.0 - 3.0 * PROB_CLAMP);
            target.set2(t, t, 1.0);
        }
        let (loss, _) = categorical_ce_loss(&pred, &target).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn cce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Tensor::from_parts(vec![3, 4], (0..12).map(|_| rng.gen_range(0.1..0.9)).collect());
        let mut target = Tensor::zeros(&[3, 4]);
        for t in 0..3 {
            target.set2(t, rng.gen_range(0..4), 1.0);
        }
        let (_, grad) = categorical_ce_loss(&pred, &target).unwrap();
        let h = 1e-7;
        for i in 0..pred.len() {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let num = (categorical_ce_loss(&plus, &target).unwrap().0
                - categorical_ce_loss(&minus, &target).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0));
        }
    }

    // -- adam ------------------------------------------------------------------

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let mut p = SoloParam(Param::new(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()));
        let before = p.0.value.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            adam.apply(&mut p);
        }
        assert_eq!(p.0.value.data(), before.data());
        for (m, v) in adam.moments.values() {
            assert!(m.data().iter().all(|&x| x == 0.0));
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let mut p = SoloParam(Param::new(Tensor::new(vec![1], vec![1.0]).unwrap()));
        p.0.grad.data_mut()[0] = 1.0;
        let mut adam = AdamState::new(AdamConfig::default());
        adam.apply(&mut p);
        // m_hat = v_hat = 1 exactly; update = lr / (1 + eps).
        assert!((p.0.value.data()[0] - 0.999).abs() <= 1e-6);
    }

    #[test]
    fn adam_matches_scalar_reference_over_100_steps() {
        let cfg = AdamConfig::default();
        let mut p = SoloParam(Param::new(Tensor::new(vec![1], vec![1.0]).unwrap()));
        let mut adam = AdamState::new(cfg);
        // Independent scalar recurrence.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=100 {
            let g = 0.3 * (t as f64).sin() + 1.0;
            p.0.grad.data_mut()[0] = g;
            adam.apply(&mut p);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            assert!(
                (p.0.value.data()[0] - x).abs() <= 1e-12,
                "step {t}: {} vs {x}",
                p.0.value.data()[0]
            );
        }
    }

    // -- early stopping -----------------------------------------------------------

    #[test]
    fn stopper_patience_two_sequence() {
        let mut stopper = EarlyStopper::new(2);
        let losses = [1.0, 0.9, 0.95, 0.96];
        let mut stopped_after = None;
        for (i, &loss) in losses.iter().enumerate() {
            let epoch = i + 1;
            stopper.observe(epoch, loss);
            if stopper.should_stop() {
                stopped_after = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_after, Some(4));
        assert_eq!(stopper.best_epoch, 2);
        assert_eq!(stopper.best_loss, 0.9);
    }

    #[test]
    fn stopper_equal_loss_is_not_improvement() {
        let mut stopper = EarlyStopper::new(1);
        stopper.observe(1, 0.5);
        assert!(!stopper.observe(2, 0.5));
        assert!(stopper.should_stop());
    }

    // -- training loop ---------------------------------------------------------------

    fn tiny_dataset(seed: u64) -> crate::data::SequenceDataset {
        let config = SynthConfig {
            classes: 4,
            features: 8,
            seq_len: 64,
            train_sequences: 8,
            val_sequences: 2,
            test_sequences: 2,
            events_per_class: 2,
            min_duration: 6,
            max_duration: 16,
            dependencies: vec![crate::data::DependencyRule {
                trigger: 0,
                dependent: 1,
                max_gap: 6,
            }],
            polyphony_cap: 4,
            base_gain: 3.0,
            dependent_gain: 1.5,
            noise_level: 0.3,
        };
        synth_generate(&config, seed).unwrap()
    }

    #[test]
    fn training_loss_decreases_on_tiny_synthetic_set() {
        for seed in 0..5u64 {
            let dataset = tiny_dataset(seed);
            let train_items = dataset.split_items(Split::Train);
            let val_items = dataset.split_items(Split::Val);
            let mut model = Model::new(micro_model_config(), seed).unwrap();
            let config = TrainConfig {
                batch_size: 16,
                patience: 30,
                max_epochs: 10,
                adam: AdamConfig::default(),
                seed,
            };
            let outcome =
                train(&mut model, &train_items, &val_items, &config, &BTreeMap::new()).unwrap();
            assert_eq!(outcome.log.len(), 10);
            let first = outcome.log.first().unwrap().train_loss;
            let last = outcome.log.last().unwrap().train_loss;
            assert!(
                last < first,
                "seed {seed}: train loss {first} -> {last} did not decrease"
            );
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let dataset = tiny_dataset(1);
        let train_items = dataset.split_items(Split::Train);
        let val_items = dataset.split_items(Split::Val);
        let mut model = Model::new(micro_model_config(), 9).unwrap();
        let mut before = Vec::new();
        model.for_each_param("", &mut |_, p| before.push(p.value.clone()));
        let config = TrainConfig {
            batch_size: 4,
            patience: 30,
            max_epochs: 3,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            seed: 5,
        };
        let _ = train(&mut model, &train_items, &val_items, &config, &BTreeMap::new()).unwrap();
        let mut i = 0;
        model.for_each_param("", &mut |_, p| {
            assert_eq!(p.value.data(), before[i].data());
            i += 1;
        });
    }

    #[test]
    fn best_checkpoint_has_the_lowest_logged_val_loss() {
        let dataset = tiny_dataset(2);
        let train_items = dataset.split_items(Split::Train);
        let val_items = dataset.split_items(Split::Val);
        let mut model = Model::new(micro_model_config(), 4).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            patience: 30,
            max_epochs: 8,
            adam: AdamConfig::default(),
            seed: 11,
        };
        let outcome =
            train(&mut model, &train_items, &val_items, &config, &BTreeMap::new()).unwrap();
        let min_logged = outcome
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_loss, min_logged);
        // The restored best model reproduces that loss.
        let mut restored = outcome.best.build_model().unwrap();
        let loss = eval_loss(&mut restored, &val_items).unwrap();
        assert!((loss - outcome.best_val_loss).abs() <= 1e-12);
    }

    #[test]
    fn training_is_deterministic_given_a_seed() {
        let dataset = tiny_dataset(3);
        let train_items = dataset.split_items(Split::Train);
        let val_items = dataset.split_items(Split::Val);
        let config = TrainConfig {
            batch_size: 4,
            patience: 30,
            max_epochs: 4,
            adam: AdamConfig::default(),
            seed: 77,
        };
        let run = || {
            let mut model = Model::new(micro_model_config(), 13).unwrap();
            train(&mut model, &train_items, &val_items, &config, &BTreeMap::new()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    }

    #[test]
    fn empty_split_is_an_error() {
        let dataset = tiny_dataset(4);
        let train_items = dataset.split_items(Split::Train);
        let mut model = Model::new(micro_model_config(), 0).unwrap();
        let err = train(
            &mut model,
            &train_items,
            &[],
            &TrainConfig::default(),
            &BTreeMap::new(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, TrainError::EmptySplit(Split::Val)));
    }

    #[test]
    fn perfect_oracle_stub_evaluates_perfectly() {
        let dataset = tiny_dataset(6);
        let items = dataset.split_items(Split::Test);
        let report = evaluate_items(&items, 0.5, |item| Ok(item.labels.clone())).unwrap();
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.er, 0.0);
    }

    #[test]
    fn ndjson_log_shape() {
        let log = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.6,
            wall_time: 1.25,
            seed: 3,
        }];
        let text = log_to_ndjson(&log);
        assert!(text.ends_with('\n'));
        let parsed: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(parsed["epoch"], 1);
        assert_eq!(parsed["seed"], 3);
    }
}
