//! Experiment configuration: TOML surface, defaults, validation, and the
//! canonical echo printed at the start of a run.
//!
//! The full schema is documented in `book/src/data-and-configs.md`. Parsing
//! rejects unknown keys immediately; semantic validation collects every
//! violation into one configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ColumnRef;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Csv,
    Idx,
}

/// Label column by 0-based index or by header name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSpec {
    Index(usize),
    Name(String),
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec::Index(0)
    }
}

impl ColumnSpec {
    pub fn to_column_ref(&self) -> ColumnRef {
        match self {
            ColumnSpec::Index(i) => ColumnRef::Index(*i),
            ColumnSpec::Name(n) => ColumnRef::Name(n.clone()),
        }
    }
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_splits() -> Vec<f64> {
    vec![0.7, 0.15, 0.15]
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default)]
    pub task: Task,

    /// CSV: the data file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// CSV: a given test set in a separate file sharing the training
    /// file's layout and class vocabulary; `splits` then only cover the
    /// training file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub label_column: ColumnSpec,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    /// CSV: consecutive train/validation/test fractions of the shuffled
    /// rows, between one and three entries summing to at most 1.
    #[serde(default = "default_splits")]
    pub splits: Vec<f64>,

    /// IDX: training pair, and optionally a given test pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// IDX: fraction of the training pair carved off as validation.
    #[serde(default)]
    pub val_fraction: f64,

    /// Shuffle/split seed, independent of the run seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_feature_count() -> usize {
    100
}

fn default_kernels() -> usize {
    80
}

fn default_kernel_size() -> usize {
    5
}

fn default_stride() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    InnerProduct,
    Conv,
    None,
}

/// The learnable feature pool in front of the forest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    /// Inner-product pool size.
    #[serde(default = "default_feature_count")]
    pub count: usize,
    /// Convolution kernels, kernel size, and stride.
    #[serde(default = "default_kernels")]
    pub kernels: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kind: FeatureKind::InnerProduct,
            count: default_feature_count(),
            kernels: default_kernels(),
            kernel_size: default_kernel_size(),
            stride: default_stride(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestKindSpec {
    #[default]
    Tree,
    Fern,
}

impl ForestKindSpec {
    pub fn to_kind(self) -> crate::forest::ForestKind {
        match self {
            ForestKindSpec::Tree => crate::forest::ForestKind::Tree,
            ForestKindSpec::Fern => crate::forest::ForestKind::Fern,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    #[serde(default)]
    pub kind: ForestKindSpec,
    pub trees: usize,
    pub depth: usize,
    /// How per-tree outputs combine into one prediction.
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_opt_epsilon() -> f64 {
    crate::opt::DEFAULT_EPSILON
}

fn default_optimizer_name() -> String {
    "adagrad".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer_name")]
    pub name: String,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_opt_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: default_optimizer_name(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_opt_epsilon(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn settings(&self) -> crate::opt::OptimizerSettings {
        crate::opt::OptimizerSettings {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Validation,
    Test,
}

fn default_batch_size() -> usize {
    32
}

fn default_max_steps() -> u64 {
    1000
}

fn default_eval_interval() -> u64 {
    100
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Which split picks the best checkpoint.
    #[serde(default)]
    pub selection: Selection,
    /// Resume parameters and optimizer state from a saved model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: default_batch_size(),
            max_steps: default_max_steps(),
            eval_interval: default_eval_interval(),
            seed: default_seed(),
            out_dir: default_out_dir(),
            selection: Selection::default(),
            resume_from: None,
        }
    }
}

/// Architecture description shared by the graph builder and the model file
/// manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub task: Task,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            features: self.features.clone(),
            forest: self.forest,
            task: self.dataset.task,
        }
    }

    /// Canonical echo with all defaults filled in.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every semantic rule, returning one error that lists all
    /// violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let d = &self.dataset;
        match d.format {
            DataFormat::Csv => {
                match &d.path {
                    None => problems.push("dataset.path: required for csv format".into()),
                    Some(p) => {
                        if !p.exists() {
                            problems
                                .push(format!("dataset.path: '{}' does not exist", p.display()));
                        }
                    }
                }
                if d.delimiter.chars().count() != 1 {
                    problems.push(format!(
                        "dataset.delimiter: must be a single character, got '{}'",
                        d.delimiter
                    ));
                }
                if let Some(p) = &d.test_path {
                    if !p.exists() {
                        problems.push(format!(
                            "dataset.test_path: '{}' does not exist",
                            p.display()
                        ));
                    }
                }
                let max_splits = if d.test_path.is_some() { 2 } else { 3 };
                if d.splits.is_empty() || d.splits.len() > max_splits {
                    problems.push(format!(
                        "dataset.splits: expected 1 to {max_splits} fractions, got {}",
                        d.splits.len()
                    ));
                }
                if d.splits.iter().any(|&f| f <= 0.0) {
                    problems.push("dataset.splits: fractions must be positive".into());
                }
                if d.splits.iter().sum::<f64>() > 1.0 + 1e-9 {
                    problems.push("dataset.splits: fractions must sum to at most 1".into());
                }
            }
            DataFormat::Idx => {
                for (field, value) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                ] {
                    match value {
                        None => problems.push(format!("{field}: required for idx format")),
                        Some(p) if !p.exists() => {
                            problems.push(format!("{field}: '{}' does not exist", p.display()))
                        }
                        _ => {}
                    }
                }
                for (field, value) in [
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    if let Some(p) = value {
                        if !p.exists() {
                            problems.push(format!("{field}: '{}' does not exist", p.display()));
                        }
                    }
                }
                if d.test_images.is_some() != d.test_labels.is_some() {
                    problems.push(
                        "dataset.test_images/test_labels: both or neither must be set".into(),
                    );
                }
                if !(0.0..1.0).contains(&d.val_fraction) {
                    problems.push(format!(
                        "dataset.val_fraction: must be in [0, 1), got {}",
                        d.val_fraction
                    ));
                }
                if d.task == Task::Regression {
                    problems.push("dataset.task: idx datasets are classification".into());
                }
            }
        }

        match self.features.kind {
            FeatureKind::InnerProduct => {
                if self.features.count == 0 {
                    problems.push("features.count: must be at least 1".into());
                }
            }
            FeatureKind::Conv => {
                if self.features.kernels == 0 {
                    problems.push("features.kernels: must be at least 1".into());
                }
                if self.features.kernel_size == 0 {
                    problems.push("features.kernel_size: must be at least 1".into());
                }
                if self.features.stride == 0 {
                    problems.push("features.stride: must be at least 1".into());
                }
            }
            FeatureKind::None => {}
        }

        if self.forest.trees == 0 {
            problems.push("forest.trees: must be at least 1".into());
        }
        if self.forest.depth == 0 {
            problems.push("forest.depth: must be at least 1".into());
        } else if self.forest.depth > 16 {
            problems.push(format!(
                "forest.depth: {} exceeds the supported maximum of 16",
                self.forest.depth
            ));
        }

        let o = &self.optimizer;
        if !matches!(o.name.as_str(), "sgd" | "adagrad" | "adam") {
            problems.push(format!(
                "optimizer.name: unknown optimizer '{}', expected sgd, adagrad or adam",
                o.name
            ));
        }
        if o.learning_rate <= 0.0 {
            problems.push("optimizer.learning_rate: must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) {
            problems.push("optimizer.beta1: must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&o.beta2) {
            problems.push("optimizer.beta2: must be in [0, 1)".into());
        }
        if o.epsilon <= 0.0 {
            problems.push("optimizer.epsilon: must be positive".into());
        }
        if o.weight_decay < 0.0 {
            problems.push("optimizer.weight_decay: must be nonnegative".into());
        }

        let r = &self.run;
        if r.batch_size == 0 {
            problems.push("run.batch_size: must be at least 1".into());
        }
        if r.eval_interval == 0 {
            problems.push("run.eval_interval: must be at least 1".into());
        }
        match r.selection {
            Selection::Validation => {
                let has_val = match d.format {
                    DataFormat::Csv => d.splits.len() >= 2,
                    DataFormat::Idx => d.val_fraction > 0.0,
                };
                if !has_val {
                    problems.push(
                        "run.selection: 'validation' needs a validation split (dataset.splits or dataset.val_fraction)"
                            .into(),
                    );
                }
            }
            Selection::Test => {
                let has_test = match d.format {
                    DataFormat::Csv => d.splits.len() >= 3 || d.test_path.is_some(),
                    DataFormat::Idx => d.test_images.is_some(),
                };
                if !has_test {
                    problems.push("run.selection: 'test' needs a test split".into());
                }
            }
        }
        if let Some(p) = &r.resume_from {
            if !p.exists() {
                problems.push(format!(
                    "run.resume_from: '{}' does not exist",
                    p.display()
                ));
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            let mut message = String::from("invalid configuration:");
            for p in &problems {
                let _ = write!(message, "\n  - {p}");
            }
            Err(Error::Config(message))
        }
    }
}

/// Parses TOML text into a validated configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Reads and parses a configuration file. Relative dataset paths are
/// resolved against the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
    let mut config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse '{}': {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        let rebase_opt = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&path);
                }
            }
        };
        rebase_opt(&mut config.dataset.path);
        rebase_opt(&mut config.dataset.test_path);
        rebase_opt(&mut config.dataset.train_images);
        rebase_opt(&mut config.dataset.train_labels);
        rebase_opt(&mut config.dataset.test_images);
        rebase_opt(&mut config.dataset.test_labels);
        rebase_opt(&mut config.run.resume_from);
        if config.run.out_dir.is_relative() {
            config.run.out_dir = dir.join(&config.run.out_dir);
        }
    }
    config.validate()?;
    Ok(config)
}
