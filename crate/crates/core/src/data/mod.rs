//! Dataset handling: sequence items, normalization statistics, chunking,
//! the on-disk feature directory format, audio feature extraction, and the
//! synthetic generator with planted temporal class dependencies.

mod features;
mod synth;

pub use features::{
    extract_logmel, load_wav, mel_center_frequencies, mel_filterbank, parse_wav,
    stft_window_hop, AudioBuffer,
};
pub use synth::{scan_dependency, synth_generate, DependencyRule, SynthConfig};

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("item {id}: {detail}")]
    BadItem { id: String, detail: String },
    #[error("label value {value} in item {id} is not 0 or 1")]
    LabelNotBinary { id: String, value: f64 },
    #[error("empty audio input")]
    EmptyAudio,
    #[error("expected mono audio, got {channels} channels")]
    NotMono { channels: usize },
    #[error("wav: {0}")]
    Wav(String),
    #[error("dependency table has a cycle through class {class}")]
    DependencyCycle { class: usize },
    #[error("generator config: {0}")]
    BadGeneratorConfig(String),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One fixed-length sequence: features `[T, F]`, binary labels `[T, C]`, and
/// the number of leading rows that are real data (the rest is zero padding
/// from chunking, excluded from loss and metrics).
#[derive(Debug, Clone)]
pub struct SequenceItem {
    pub id: String,
    pub features: Tensor,
    pub labels: Tensor,
    pub split: Split,
    pub valid_len: usize,
}

/// An ordered collection of equally-shaped sequence items.
#[derive(Debug, Clone, Default)]
pub struct SequenceDataset {
    pub items: Vec<SequenceItem>,
    pub class_names: Vec<String>,
}

impl SequenceDataset {
    pub fn seq_len(&self) -> usize {
        self.items.first().map_or(0, |i| i.features.shape()[0])
    }

    pub fn num_features(&self) -> usize {
        self.items.first().map_or(0, |i| i.features.shape()[1])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_items(&self, split: Split) -> Vec<&SequenceItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Enforce the dataset invariants: uniform shapes, binary labels,
    /// `valid_len <= T`, unique ids.
    pub fn validate(&self) -> Result<()> {
        let (t, f, c) = (self.seq_len(), self.num_features(), self.num_classes());
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(&item.id) {
                return Err(DataError::BadItem {
                    id: item.id.clone(),
                    detail: "duplicate id".into(),
                });
            }
            if item.features.shape() != [t, f] {
                return Err(DataError::BadItem {
                    id: item.id.clone(),
                    detail: format!(
                        "features shape {:?}, expected [{t}, {f}]",
                        item.features.shape()
                    ),
                });
            }
            if item.labels.shape() != [t, c] {
                return Err(DataError::BadItem {
                    id: item.id.clone(),
                    detail: format!("labels shape {:?}, expected [{t}, {c}]", item.labels.shape()),
                });
            }
            if item.valid_len > t {
                return Err(DataError::BadItem {
                    id: item.id.clone(),
                    detail: format!("valid_len {} exceeds T {t}", item.valid_len),
                });
            }
            for &v in item.labels.data() {
                if v != 0.0 && v != 1.0 {
                    return Err(DataError::LabelNotBinary {
                        id: item.id.clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Items ordered lexicographically by id, for deterministic assembly.
    pub fn sort_by_id(&mut self) {
        self.items.sort_by(|a, b| a.id.cmp(&b.id));
    }
}

/// Per-band normalization statistics, computed from the training split only.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Tensor, // [F]
    pub std: Tensor,  // [F]
}

/// Floor applied to per-band standard deviations to guard dead bands.
pub const STD_FLOOR: f64 = 1e-5;

impl NormStats {
    /// Population statistics over the valid frames of the given items.
    pub fn compute(items: &[&SequenceItem]) -> Result<Self> {
        let f = items
            .first()
            .ok_or(DataError::EmptySplit("normalization source"))?
            .features
            .shape()[1];
        let mut count = 0usize;
        let mut sum = vec![0.0; f];
        for item in items {
            for t in 0..item.valid_len {
                for (x, s) in item.features.row(t).iter().zip(&mut sum) {
                    *s += x;
                }
            }
            count += item.valid_len;
        }
        if count == 0 {
            return Err(DataError::EmptySplit("normalization source"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; f];
        for item in items {
            for t in 0..item.valid_len {
                for (j, x) in item.features.row(t).iter().enumerate() {
                    let d = x - mean[j];
                    sq[j] += d * d;
                }
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            mean: Tensor::from_parts(vec![f], mean),
            std: Tensor::from_parts(vec![f], std),
        })
    }

    /// `(x - mean) / std` per band, in place, over all rows.
    pub fn apply(&self, features: &mut Tensor) {
        let f = features.shape()[1];
        debug_assert_eq!(self.mean.shape(), &[f]);
        let rows = features.shape()[0];
        for t in 0..rows {
            for (j, v) in features.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean.data()[j]) / self.std.data()[j];
            }
        }
    }

    pub fn identity(f: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[f]),
            std: Tensor::full(&[f], 1.0),
        }
    }
}

/// Cut a long recording into non-overlapping `T`-row chunks. The tail chunk
/// is zero-padded and its `valid_len` marks the real rows.
pub fn chunk_sequence(
    features: &Tensor,
    labels: &Tensor,
    t: usize,
    id_prefix: &str,
    split: Split,
) -> Vec<SequenceItem> {
    let (n, f) = (features.shape()[0], features.shape()[1]);
    let c = labels.shape()[1];
    debug_assert_eq!(labels.shape()[0], n);
    let mut items = Vec::new();
    let mut start = 0;
    let mut index = 0;
    while start < n {
        let valid = (n - start).min(t);
        let mut feat = Tensor::zeros(&[t, f]);
        let mut lab = Tensor::zeros(&[t, c]);
        for row in 0..valid {
            feat.row_mut(row).copy_from_slice(features.row(start + row));
            lab.row_mut(row).copy_from_slice(labels.row(start + row));
        }
        items.push(SequenceItem {
            id: format!("{id_prefix}.{index:04}"),
            features: feat,
            labels: lab,
            split,
            valid_len: valid,
        });
        start += t;
        index += 1;
    }
    items
}

/// Chunk a recording and normalize each band with the supplied statistics.
pub fn chunk_and_normalize(
    features: &Tensor,
    labels: &Tensor,
    stats: &NormStats,
    t: usize,
    id_prefix: &str,
    split: Split,
) -> Vec<SequenceItem> {
    let mut items = chunk_sequence(features, labels, t, id_prefix, split);
    for item in &mut items {
        // Normalize only the valid rows; padding stays zero.
        for row in 0..item.valid_len {
            for (j, v) in item.features.row_mut(row).iter_mut().enumerate() {
                *v = (*v - stats.mean.data()[j]) / stats.std.data()[j];
            }
        }
    }
    items
}

// ---------------------------------------------------------------------------
// Feature directory
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    id: String,
    split: Split,
    valid_len: usize,
}

#[derive(Serialize, Deserialize)]
struct DirManifest {
    class_names: Vec<String>,
    t: usize,
    f: usize,
    c: usize,
    items: Vec<ManifestItem>,
}

/// Write a dataset as `manifest.json` plus one `DLC1` tensor file per item
/// per role. Round-trips bitwise through [`load_feature_dir`].
pub fn save_feature_dir(dir: &Path, dataset: &SequenceDataset) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut sorted: Vec<&SequenceItem> = dataset.items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = DirManifest {
        class_names: dataset.class_names.clone(),
        t: dataset.seq_len(),
        f: dataset.num_features(),
        c: dataset.num_classes(),
        items: sorted
            .iter()
            .map(|i| ManifestItem {
                id: i.id.clone(),
                split: i.split,
                valid_len: i.valid_len,
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    for item in sorted {
        item.features
            .save_dlc1(&dir.join(format!("{}.features.dlc", item.id)))?;
        item.labels
            .save_dlc1(&dir.join(format!("{}.labels.dlc", item.id)))?;
    }
    Ok(())
}

pub fn load_feature_dir(dir: &Path) -> Result<SequenceDataset> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read(&manifest_path)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DirManifest =
        serde_json::from_slice(&json).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.class_names.len() != manifest.c {
        return Err(DataError::Manifest(format!(
            "{} class names but c = {}",
            manifest.class_names.len(),
            manifest.c
        )));
    }
    let mut items = Vec::with_capacity(manifest.items.len());
    for entry in &manifest.items {
        let features = Tensor::load_dlc1(&dir.join(format!("{}.features.dlc", entry.id)))
            .map_err(|e| DataError::BadItem {
                id: entry.id.clone(),
                detail: e.to_string(),
            })?;
        let labels = Tensor::load_dlc1(&dir.join(format!("{}.labels.dlc", entry.id))).map_err(
            |e| DataError::BadItem {
                id: entry.id.clone(),
                detail: e.to_string(),
            },
        )?;
        if features.shape() != [manifest.t, manifest.f] {
            return Err(DataError::BadItem {
                id: entry.id.clone(),
                detail: format!(
                    "features shape {:?}, manifest says [{}, {}]",
                    features.shape(),
                    manifest.t,
                    manifest.f
                ),
            });
        }
        if labels.shape() != [manifest.t, manifest.c] {
            return Err(DataError::BadItem {
                id: entry.id.clone(),
                detail: format!(
                    "labels shape {:?}, manifest says [{}, {}]",
                    labels.shape(),
                    manifest.t,
                    manifest.c
                ),
            });
        }
        items.push(SequenceItem {
            id: entry.id.clone(),
            features,
            labels,
            split: entry.split,
            valid_len: entry.valid_len,
        });
    }
    let dataset = SequenceDataset {
        items,
        class_names: manifest.class_names,
    };
    dataset.validate()?;
    Ok(dataset)
}
