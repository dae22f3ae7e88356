//! Run configuration: a TOML file plus dotted/short-key `--set` overrides.
//! The shipped defaults are the full training configuration of the engine,
//! so `train` with no overrides runs the standard setup.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cdsed_core::layers::Activation;
use cdsed_core::model::ModelConfig;
use cdsed_core::optim::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One full training run per seed.
    pub seeds: Vec<u64>,
    /// Output root; relative paths resolve under `$CDSED_OUT_ROOT` when set.
    pub output_dir: PathBuf,
    /// Binarization threshold for evaluation.
    pub threshold: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            threshold: 0.5,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolve the output directory against `CDSED_OUT_ROOT`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os("CDSED_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    /// Apply one `key=value` override. Keys are short aliases; unknown keys
    /// fail fast with the offending name.
    pub fn apply_set(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set '{spec}' is not key=value")))?;
        let bad = |detail: &str| CliError::Config(format!("--set {key}={value}: {detail}"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(&e.to_string()));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(&e.to_string()));
        let parse_bool = |v: &str| match v {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err(bad("expected on/off")),
        };
        let parse_list = |v: &str| -> Result<Vec<usize>, CliError> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(&e.to_string())))
                .collect()
        };
        match key {
            "dilation" => self.model.dilation = parse_usize(value)?,
            "kernel" => {
                let k = parse_usize(value)?;
                self.model.cdcnn_kernel = (k, k);
            }
            "out_channels" => self.model.cdcnn_out_channels = parse_usize(value)?,
            "conditioning" => self.model.conditioning = parse_bool(value)?,
            "teacher_forcing" => self.model.teacher_forcing = parse_bool(value)?,
            "detach_conditioning" => self.model.detach_conditioning = parse_bool(value)?,
            "blocks" => self.model.blocks = parse_usize(value)?,
            "channels" => self.model.channels = parse_list(value)?,
            "pool_widths" => self.model.pool_widths = parse_list(value)?,
            "depthwise_kernel" => {
                let k = parse_usize(value)?;
                self.model.depthwise_kernel = (k, k);
            }
            "dropout" => self.model.dropout_p = parse_f64(value)?,
            "lrelu_beta" => self.model.lrelu_beta = parse_f64(value)?,
            "num_classes" => self.model.num_classes = parse_usize(value)?,
            "num_features" => self.model.num_features = parse_usize(value)?,
            "activation" => {
                self.model.classifier_activation = match value {
                    "sigmoid" => Activation::Sigmoid,
                    "softmax" => Activation::Softmax,
                    _ => return Err(bad("expected sigmoid or softmax")),
                }
            }
            "lr" => self.train.adam.lr = parse_f64(value)?,
            "beta1" => self.train.adam.beta1 = parse_f64(value)?,
            "beta2" => self.train.adam.beta2 = parse_f64(value)?,
            "epsilon" => self.train.adam.epsilon = parse_f64(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "patience" => self.train.patience = parse_usize(value)?,
            "max_epochs" => self.train.max_epochs = parse_usize(value)?,
            "threshold" => self.threshold = parse_f64(value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().map_err(|e| bad(&e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown --set key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Short label for reports: CDCNN_{dilation,kernel} or Base_{...}.
    pub fn method_label(&self) -> String {
        let prefix = if self.model.conditioning { "CDCNN" } else { "Base" };
        format!("{}_{{{},{}}}", prefix, self.model.dilation, self.model.cdcnn_kernel.0)
    }
}
