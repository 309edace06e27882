//! The TOML run configuration. Unknown keys are rejected so a typo in a
//! hyperparameter name fails fast instead of silently training defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use hydradoc_core::attention::AttentionWindow;
use hydradoc_core::params::HeadArchitecture;
use hydradoc_core::train::BinaryLoss;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub blocking: BlockingSection,
    pub embedding: EmbeddingSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub dataset: DatasetSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            blocking: BlockingSection::default(),
            embedding: EmbeddingSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            dataset: DatasetSection::default(),
        }
    }
}

/// Block size 100 chars, max document 5000 chars.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockingSection {
    pub block_size_chars: usize,
    pub max_doc_chars: usize,
}

impl Default for BlockingSection {
    fn default() -> Self {
        BlockingSection {
            block_size_chars: 100,
            max_doc_chars: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Hash,
    Remote,
}

/// 512-dimensional hashing backend by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub backend: BackendKind,
    pub dim: usize,
    pub hash_seed: u64,
    pub endpoint: Option<String>,
    pub remote_name: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub cache_path: Option<PathBuf>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            backend: BackendKind::Hash,
            dim: 512,
            hash_seed: 0,
            endpoint: None,
            remote_name: String::from("default"),
            timeout_ms: 10_000,
            retries: 2,
            cache_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: HeadArchitecture,
    /// Attention window for transformer heads: "global" or a block count.
    pub window: AttentionWindow,
    pub neck: NeckKind,
    pub neck_trainable: bool,
    /// One softmax head over all labels instead of one binary head each.
    pub group_softmax: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeckKind {
    Identity,
    Dense,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: HeadArchitecture::Bilstm,
            window: AttentionWindow::Global,
            neck: NeckKind::Identity,
            neck_trainable: false,
            group_softmax: false,
        }
    }
}

/// Batch 16, 5 epochs, Adam 1e-3, weighted BCE.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: BinaryLoss,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 16,
            epochs: 5,
            learning_rate: 1e-3,
            loss: BinaryLoss::WeightedBce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Directory,
    Delimited,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Index,
    Name,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Stratified hold-out fraction; omit to train on everything.
    pub test_fraction: Option<f64>,
    // Delimited-only knobs.
    pub text_column: String,
    pub label_column: String,
    pub label_kind: LabelKind,
    pub label_names: Option<Vec<String>>,
    pub delimiter: DelimiterKind,
    // Synthetic-only knobs.
    pub classes: Vec<SyntheticClassSection>,
    pub docs_per_class: usize,
    pub doc_len_chars: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Directory,
            path: None,
            test_fraction: None,
            text_column: String::from("text"),
            label_column: String::from("label"),
            label_kind: LabelKind::Index,
            label_names: None,
            delimiter: DelimiterKind::Tab,
            classes: Vec::new(),
            docs_per_class: 100,
            doc_len_chars: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelimiterKind {
    Tab,
    Comma,
}

impl DelimiterKind {
    pub fn byte(self) -> u8 {
        match self {
            DelimiterKind::Tab => b'\t',
            DelimiterKind::Comma => b',',
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClassSection {
    pub name: String,
    pub keywords: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> hydradoc_core::train::TrainConfig {
        hydradoc_core::train::TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            loss: self.train.loss,
        }
    }
}
