//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cdsed_core::data::{
    load_feature_dir, save_feature_dir, synth_generate, DependencyRule, NormStats,
    SequenceDataset, SequenceItem, Split, SynthConfig,
};
use cdsed_core::gradcheck;
use cdsed_core::metrics::{aggregate_runs, format_report_text, format_results_csv, ResultRow};
use cdsed_core::model::{param_count, Checkpoint, Model};
use cdsed_core::optim::{evaluate_model, log_to_ndjson, train as train_model};
use cdsed_core::tensor::{conv2d, conv2d_im2col, Pad, Tensor};

use crate::{CliError, RunConfig};

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("CDSED_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_config(config: Option<PathBuf>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    for set in sets {
        cfg.apply_set(set)?;
    }
    Ok(cfg)
}

/// Normalize every item in place with statistics from the training split.
fn normalize_dataset(dataset: &mut SequenceDataset) -> Result<NormStats, CliError> {
    let train_items = dataset.split_items(Split::Train);
    let stats = NormStats::compute(&train_items).map_err(CliError::from)?;
    for item in &mut dataset.items {
        for row in 0..item.valid_len {
            for (j, v) in item.features.row_mut(row).iter_mut().enumerate() {
                *v = (*v - stats.mean.data()[j]) / stats.std.data()[j];
            }
        }
    }
    Ok(stats)
}

pub fn train(
    data: PathBuf,
    config: Option<PathBuf>,
    sets: Vec<String>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config, &sets)?;
    let mut dataset = load_feature_dir(&data)?;
    // F and C are intrinsic to the dataset; adopt them when they differ.
    if cfg.model.num_features != dataset.num_features()
        || cfg.model.num_classes != dataset.num_classes()
    {
        eprintln!(
            "note: adopting dataset geometry F={} C={} (config had F={} C={})",
            dataset.num_features(),
            dataset.num_classes(),
            cfg.model.num_features,
            cfg.model.num_classes
        );
        cfg.model.num_features = dataset.num_features();
        cfg.model.num_classes = dataset.num_classes();
    }
    cfg.model.validate()?;
    let stats = normalize_dataset(&mut dataset)?;
    let train_items = dataset.split_items(Split::Train);
    let val_items = dataset.split_items(Split::Val);

    let out_dir = resolve_out(&out.unwrap_or_else(|| cfg.resolved_output_dir()))
        .join(cfg.method_label().replace(['{', '}'], ""));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut extra = BTreeMap::new();
    extra.insert("norm.mean".to_string(), stats.mean.clone());
    extra.insert("norm.std".to_string(), stats.std.clone());

    for &seed in &cfg.seeds {
        let mut model = Model::new(cfg.model.clone(), seed)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let outcome = train_model(&mut model, &train_items, &val_items, &train_cfg, &extra)?;
        let seed_dir = out_dir.join(format!("seed_{seed:04}"));
        std::fs::create_dir_all(&seed_dir).map_err(|e| CliError::Data(e.to_string()))?;
        outcome
            .best
            .save(&seed_dir.join("best.ckpt"))
            .map_err(CliError::from)?;
        std::fs::write(seed_dir.join("train_log.ndjson"), log_to_ndjson(&outcome.log))
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!(
            "seed {seed}: {} epochs, best val loss {:.6} at epoch {}",
            outcome.log.len(),
            outcome.best_val_loss,
            outcome.best_epoch
        );
    }
    println!("artifacts under {}", out_dir.display());
    Ok(())
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split '{other}'"))),
    }
}

/// Evaluate one checkpoint on a split, normalizing with its stored stats.
fn evaluate_checkpoint(
    ckpt_path: &Path,
    dataset: &SequenceDataset,
    split: Split,
    threshold: f64,
) -> Result<cdsed_core::metrics::EvalReport, CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model = ckpt.build_model()?;
    if model.config.num_features != dataset.num_features()
        || model.config.num_classes != dataset.num_classes()
    {
        return Err(CliError::Data(format!(
            "checkpoint {} expects F={} C={}, dataset has F={} C={}",
            ckpt_path.display(),
            model.config.num_features,
            model.config.num_classes,
            dataset.num_features(),
            dataset.num_classes()
        )));
    }
    let stats = match (ckpt.tensors.get("norm.mean"), ckpt.tensors.get("norm.std")) {
        (Some(mean), Some(std)) => NormStats {
            mean: mean.clone(),
            std: std.clone(),
        },
        _ => NormStats::identity(dataset.num_features()),
    };
    let items: Vec<SequenceItem> = dataset
        .split_items(split)
        .into_iter()
        .map(|item| {
            let mut it = item.clone();
            for row in 0..it.valid_len {
                for (j, v) in it.features.row_mut(row).iter_mut().enumerate() {
                    *v = (*v - stats.mean.data()[j]) / stats.std.data()[j];
                }
            }
            it
        })
        .collect();
    let refs: Vec<&SequenceItem> = items.iter().collect();
    evaluate_model(&mut model, &refs, threshold).map_err(CliError::from)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    data: PathBuf,
    checkpoints: Vec<PathBuf>,
    split: &str,
    label: &str,
    baseline_checkpoints: Vec<PathBuf>,
    baseline_label: &str,
    threshold: f64,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    let split = parse_split(split)?;
    let dataset = load_feature_dir(&data)?;
    let reports: Vec<_> = checkpoints
        .iter()
        .map(|p| evaluate_checkpoint(p, &dataset, split, threshold))
        .collect::<Result<_, _>>()?;
    let aggregate = aggregate_runs(&reports).map_err(|e| CliError::Numerical(e.to_string()))?;
    print!("{}", format_report_text(label, &reports, &aggregate));

    let mut rows = Vec::new();
    let mut base_aggregate = None;
    if !baseline_checkpoints.is_empty() {
        let base_reports: Vec<_> = baseline_checkpoints
            .iter()
            .map(|p| evaluate_checkpoint(p, &dataset, split, threshold))
            .collect::<Result<_, _>>()?;
        let base =
            aggregate_runs(&base_reports).map_err(|e| CliError::Numerical(e.to_string()))?;
        print!("{}", format_report_text(baseline_label, &base_reports, &base));
        rows.push(ResultRow {
            label: baseline_label.to_string(),
            aggregate: base.clone(),
            delta_f1_vs_base: None,
            delta_er_vs_base: None,
        });
        base_aggregate = Some(base);
    }
    rows.push(ResultRow {
        label: label.to_string(),
        aggregate: aggregate.clone(),
        delta_f1_vs_base: base_aggregate.as_ref().map(|b| aggregate.f1_mean - b.f1_mean),
        delta_er_vs_base: base_aggregate.as_ref().map(|b| aggregate.er_mean - b.er_mean),
    });
    if let Some(csv_path) = csv {
        let csv_path = resolve_out(&csv_path);
        std::fs::write(&csv_path, format_results_csv(&rows))
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("csv written to {}", csv_path.display());
    }
    Ok(())
}

pub fn gradcheck(seed: u64, scope: &str) -> Result<(), CliError> {
    let reports = match scope {
        "layers" => gradcheck::run_layer_suite(seed),
        "heads" => vec![
            gradcheck::check_dilated_head(seed, cdsed_core::model::TimePadding::Symmetric),
            gradcheck::check_dilated_head(seed, cdsed_core::model::TimePadding::Causal),
            gradcheck::check_cdcnn_micro(seed),
            gradcheck::check_cdcnn_micro_teacher(seed),
        ],
        "model" => vec![gradcheck::check_model_end_to_end(seed)],
        "all" => gradcheck::run_full_suite(seed),
        other => {
            return Err(CliError::Config(format!(
                "unknown scope '{other}', expected layers|heads|model|all"
            )))
        }
    };
    let mut failures = 0;
    for report in &reports {
        println!("{report}");
        if !report.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!(
            "{failures}/{} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

pub fn paramcount(config: Option<PathBuf>, sets: Vec<String>) -> Result<(), CliError> {
    let cfg = load_config(config, &sets)?;
    let report = param_count(&cfg.model)?;
    println!("{:<24} {:>12}", "component", "params");
    for (name, count) in &report.components {
        println!("{name:<24} {count:>12}");
    }
    println!("{:<24} {:>12}", "total", report.total);
    // Cross-check against the instantiated model.
    let mut model = Model::new(cfg.model.clone(), 0)?;
    let live = model.num_params();
    if live != report.total {
        return Err(CliError::Numerical(format!(
            "config arithmetic says {} params, live model has {live}",
            report.total
        )));
    }
    let (k_h, k_w) = cfg.model.depthwise_kernel;
    println!(
        "separable conv params {} / standard {} = {:.6} (1/K_o + 1/(K_h*K_w) per layer, kernel {k_h}x{k_w})",
        report.dws_conv_params, report.standard_conv_params, report.ratio
    );
    Ok(())
}

pub fn synthgen(out: PathBuf, seed: u64, preset: &str) -> Result<(), CliError> {
    let config = match preset {
        "default" => SynthConfig::default(),
        // Small overfit set: 8 train sequences, T=64, C=4.
        "tiny" => SynthConfig {
            classes: 4,
            features: 8,
            seq_len: 64,
            train_sequences: 8,
            val_sequences: 2,
            test_sequences: 2,
            events_per_class: 2,
            min_duration: 6,
            max_duration: 16,
            dependencies: vec![DependencyRule {
                trigger: 0,
                dependent: 1,
                max_gap: 6,
            }],
            polyphony_cap: 4,
            base_gain: 3.0,
            dependent_gain: 1.5,
            noise_level: 0.3,
        },
        // Trend experiment: strong dependencies, 500 train sequences, T=256, C=8.
        "trend" => SynthConfig {
            classes: 8,
            features: 8,
            seq_len: 256,
            train_sequences: 500,
            val_sequences: 64,
            test_sequences: 64,
            ..SynthConfig::default()
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown preset '{other}', expected default|tiny|trend"
            )))
        }
    };
    let dataset = synth_generate(&config, seed)?;
    let out = resolve_out(&out);
    save_feature_dir(&out, &dataset)?;
    println!(
        "wrote {} sequences (T={}, F={}, C={}) to {}",
        dataset.items.len(),
        dataset.seq_len(),
        dataset.num_features(),
        dataset.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn bench(
    rows: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    out_channels: usize,
    reps: usize,
) -> Result<(), CliError> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::new(
        vec![1, rows, width],
        (0..rows * width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("input construction");
    let kernels = Tensor::new(
        vec![out_channels, 1, kernel, kernel],
        (0..out_channels * kernel * kernel)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .expect("kernel construction");
    let pad = Pad::symmetric(dilation * (kernel - 1) / 2, (kernel - 1) / 2);
    let time = |f: &dyn Fn() -> Tensor| {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..reps {
            let start = std::time::Instant::now();
            let r = f();
            best = best.min(start.elapsed().as_secs_f64());
            out = Some(r);
        }
        (best, out.unwrap())
    };
    let (direct_s, direct_out) =
        time(&|| conv2d(&input, &kernels, (dilation, 1), pad).expect("conv2d"));
    let (gemm_s, gemm_out) =
        time(&|| conv2d_im2col(&input, &kernels, (dilation, 1), pad).expect("im2col"));
    let diff = direct_out.max_abs_diff(&gemm_out);
    if diff > 1e-12 {
        return Err(CliError::Numerical(format!(
            "paths disagree: max abs diff {diff:e}"
        )));
    }
    println!(
        "input 1x{rows}x{width}, kernels {out_channels}x1x{kernel}x{kernel}, dilation {dilation}, min over {reps} reps"
    );
    println!("{:<10} {:>12}", "path", "seconds");
    println!("{:<10} {:>12.6}", "direct", direct_s);
    println!("{:<10} {:>12.6}", "im2col", gemm_s);
    println!("speedup   {:>12.2}x   max abs diff {diff:.2e}", direct_s / gemm_s);
    Ok(())
}
