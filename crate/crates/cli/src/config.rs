//! Experiment configuration files.
//!
//! Configs are TOML. Top-level keys `name`, `seeds` and `output_dir` are
//! followed by these sections:
//!
//! ```toml
//! [dataset]        # kind = "synthetic" | "cifar10" | "cifar100" | "svhn"
//! [teacher]        # or `teacher = "tiny-t"` for a built-in architecture
//! [student]
//! [distill]        # temperature, alpha, beta, head_units, kd_alpha
//! [head]           # auxiliary head internals (all optional)
//! [optim]          # lr, lr_milestones, epochs, batch_size, momentum, ...
//! [augment]        # enabled, pad, crop, hflip_prob (all optional)
//! [baselines]      # kd, student_ce (optional)
//! [ablation]       # head_sets = [[1], [2], [3], [1, 2, 3]] (optional)
//! [runtime]        # eval_batch_size, verbose (optional)
//! ```
//!
//! Unknown keys are rejected. Required keys missing from a section produce an
//! error naming the key and its line.

use std::path::{Path, PathBuf};

use mhkd::data::{load_cifar, AugmentPolicy, CifarVariant, Dataset, SynthSpec, DATA_ROOT_ENV};
use mhkd::distill::{AuxHeadSpec, DistillConfig};
use mhkd::nn::{presets, NetworkSpec, TaskSpec};
use mhkd::train::{OptimConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        difficulty: f64,
        seed: u64,
    },
    Cifar10 {
        /// Falls back to the data-root environment variable.
        root: Option<PathBuf>,
        /// Keep only the first N training records.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Cifar100 {
        root: Option<PathBuf>,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    /// Accepted in configs so the hyperparameters have a home; loading fails.
    Svhn {
        root: Option<PathBuf>,
    },
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Synthetic { num_classes, .. } => *num_classes,
            Self::Cifar10 { .. } | Self::Svhn { .. } => 10,
            Self::Cifar100 { .. } => 100,
        }
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec::new(self.num_classes(), (3, 32, 32))
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let cifar = |root: &Option<PathBuf>, variant, train_limit: &Option<usize>, test_limit: &Option<usize>| {
            let root = data_root(root)?;
            let (mut train, mut test) = load_cifar(&root, variant).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if let Some(n) = train_limit {
                train = train.truncated(*n);
            }
            if let Some(n) = test_limit {
                test = test.truncated(*n);
            }
            Ok((train, test))
        };
        match self {
            Self::Synthetic { num_classes, train_per_class, test_per_class, difficulty, seed } => SynthSpec {
                num_classes: *num_classes,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                seed: *seed,
                difficulty: *difficulty,
            }
            .generate()
            .map_err(|e| ConfigError::Invalid(e.to_string())),
            Self::Cifar10 { root, train_limit, test_limit } => {
                cifar(root, CifarVariant::Cifar10, train_limit, test_limit)
            }
            Self::Cifar100 { root, train_limit, test_limit } => {
                cifar(root, CifarVariant::Cifar100, train_limit, test_limit)
            }
            Self::Svhn { .. } => Err(ConfigError::Invalid(
                "SVHN ingestion is not supported; the svhn preset only records its hyperparameters".into(),
            )),
        }
    }
}

fn data_root(root: &Option<PathBuf>) -> Result<PathBuf, ConfigError> {
    match root {
        Some(r) => Ok(r.clone()),
        None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
            ConfigError::Invalid(format!("dataset root not set: add `root` to [dataset] or set {DATA_ROOT_ENV}"))
        }),
    }
}

/// A built-in architecture name or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Preset(String),
    Inline(NetworkSpec),
}

impl NetworkRef {
    pub fn resolve(&self, input_channels: usize) -> Result<NetworkSpec, ConfigError> {
        match self {
            Self::Preset(name) => presets::by_name(name, input_channels).ok_or_else(|| {
                ConfigError::Invalid(format!("unknown architecture preset {name:?}; known: {:?}", presets::NAMES))
            }),
            Self::Inline(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentPolicy::default();
        Self { enabled: true, pad: p.pad, crop: p.crop, hflip_prob: p.hflip_prob }
    }
}

impl AugmentConfig {
    pub fn policy(&self) -> Option<AugmentPolicy> {
        self.enabled.then_some(AugmentPolicy { pad: self.pad, crop: self.crop, hflip_prob: self.hflip_prob })
    }
}

/// Extra runs trained next to the configured distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    /// Plain KD at the final outputs with the same temperature and kd_alpha.
    pub kd: bool,
    /// Student trained from scratch with cross-entropy.
    pub student_ce: bool,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self { kd: true, student_ce: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub head_sets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub eval_batch_size: usize,
    pub verbose: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { eval_batch_size: 256, verbose: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub teacher: NetworkRef,
    pub student: NetworkRef,
    pub distill: DistillConfig,
    #[serde(default)]
    pub head: AuxHeadSpec,
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

/// Built-in experiment configs, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("tiny-pair-synth", include_str!("../presets/tiny-pair-synth.toml")),
    ("tiny-pair-cifar10", include_str!("../presets/tiny-pair-cifar10.toml")),
    ("paper-cifar100", include_str!("../presets/paper-cifar100.toml")),
    ("paper-svhn", include_str!("../presets/paper-svhn.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

impl ExperimentConfig {
    /// Parses and validates; `origin` labels diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or a built-in preset when `arg` names one and no
    /// such file exists.
    pub fn load(arg: &str) -> Result<Self, ConfigError> {
        let path = Path::new(arg);
        if !path.exists() {
            if let Some(text) = preset(arg) {
                return Self::parse(text, arg);
            }
        }
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, arg)
    }

    pub fn task(&self) -> TaskSpec {
        self.dataset.task()
    }

    pub fn teacher_spec(&self) -> Result<NetworkSpec, ConfigError> {
        self.teacher.resolve(self.task().input_channels)
    }

    pub fn student_spec(&self) -> Result<NetworkSpec, ConfigError> {
        self.student.resolve(self.task().input_channels)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            augment: self.augment.policy(),
            eval_batch_size: self.runtime.eval_batch_size,
            verbose: self.runtime.verbose,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return invalid("seeds must list at least one seed".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return invalid(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if let DatasetConfig::Synthetic { num_classes, train_per_class, test_per_class, difficulty, .. } = &self.dataset
        {
            if *num_classes < 2
                || *train_per_class == 0
                || *test_per_class == 0
                || difficulty.is_nan()
                || *difficulty < 0.0
            {
                return invalid(
                    "synthetic dataset needs num_classes >= 2, non-empty splits and difficulty >= 0".into(),
                );
            }
        }
        let task = self.task();
        let teacher = self.teacher_spec()?;
        let student = self.student_spec()?;
        for (role, spec) in [("teacher", &teacher), ("student", &student)] {
            spec.validate(&task).map_err(|e| ConfigError::Invalid(format!("{role}: {e}")))?;
        }
        self.distill.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.head.validate().map_err(|e| ConfigError::Invalid(format!("head: {e}")))?;
        let units = teacher.num_units().min(student.num_units());
        let sets = std::iter::once(&self.distill.head_units).chain(self.ablation.iter().flat_map(|a| &a.head_sets));
        for set in sets {
            if let Some(u) = set.iter().find(|&&u| u == 0 || u > units) {
                return invalid(format!("head unit {u} outside 1..={units}"));
            }
            let cfg = DistillConfig { head_units: set.clone(), ..self.distill.clone() };
            cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.ablation.as_ref().is_some_and(|a| a.head_sets.iter().any(|s| s.is_empty())) {
            return invalid("ablation head_sets must not contain an empty set".into());
        }
        if self.augment.enabled && self.augment.crop != task.input_height.min(task.input_width) {
            return invalid(format!("augment.crop must equal the input size {}", task.input_height));
        }
        if self.runtime.eval_batch_size == 0 {
            return invalid("runtime.eval_batch_size must be positive".into());
        }
        Ok(())
    }

    /// The config with architectures inlined, so it reproduces the run alone.
    pub fn resolved(&self) -> Result<Self, ConfigError> {
        Ok(Self {
            teacher: NetworkRef::Inline(self.teacher_spec()?),
            student: NetworkRef::Inline(self.student_spec()?),
            ..self.clone()
        })
    }
}
