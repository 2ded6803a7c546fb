//! Experiment configuration, read from JSON.
//!
//! Every field has a default, so a config file only needs the fields it
//! changes. [`ExperimentConfig::preset`] gives the defaults for each kind.
//!
//! ```json
//! {
//!   "kind": "pair-decorrelated",
//!   "dataset": "mnist",
//!   "architecture": "fc",
//!   "seeds": [1, 2, 3],
//!   "train": { "epochs": 20, "batch_size": 500, "learning_rate": 0.005, "lambda": 0.05, "seed": 0 },
//!   "attacks": { "methods": ["fgsm"], "norms": ["linf"], "epsilons": [0.05, 0.1], "pgd_steps": 40 },
//!   "subsets": { "train": 10000, "test": 2000 },
//!   "out": "runs/fc-pair"
//! }
//! ```

use std::path::{Path, PathBuf};

use decorr_core::attacks::{AttackConfig, Method, Norm};
use decorr_core::models::{
    build_autoencoder_baseline, build_cnn_classifier, build_dna_cifar, build_dna_mnist, build_eval_classifier_cifar,
    build_eval_classifier_mnist, build_fc_classifier, DnaSpec, ModelSpec,
};
use decorr_core::train::{DvergeConfig, TrainConfig};
use decorr_core::Error;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetName;
use crate::error::{label, read, FormatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Pairs pulled towards target parameter distances.
    PairDistance,
    /// Baseline and decorrelated pairs side by side.
    PairDecorrelated,
    /// Dual-neck autoencoders against a single-neck baseline.
    Dna,
    /// DVERGE-lite fine-tuning from baseline and decorrelated starts.
    Dverge,
    /// Feature correlation statistics and PCA scatter data.
    CorrAnalysis,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::PairDistance => "pair-distance",
            ExperimentKind::PairDecorrelated => "pair-decorrelated",
            ExperimentKind::Dna => "dna",
            ExperimentKind::Dverge => "dverge",
            ExperimentKind::CorrAnalysis => "corr-analysis",
        }
    }
}

/// Classifier pair architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Fc,
    Cnn,
}

impl Architecture {
    pub fn spec(self) -> ModelSpec {
        match self {
            Architecture::Fc => build_fc_classifier(),
            Architecture::Cnn => build_cnn_classifier(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackGrid {
    pub methods: Vec<Method>,
    pub norms: Vec<Norm>,
    /// ℓ∞-scale magnitudes; `0` evaluates clean inputs.
    pub epsilons: Vec<f64>,
    pub pgd_steps: usize,
    /// PGD step size; `null` uses the default schedule.
    pub alpha: Option<f64>,
}

impl Default for AttackGrid {
    fn default() -> Self {
        AttackGrid {
            methods: vec![Method::Fgsm, Method::Pgd],
            norms: vec![Norm::Linf, Norm::L2],
            epsilons: vec![0.05, 0.1, 0.15, 0.2],
            pgd_steps: 40,
            alpha: None,
        }
    }
}

impl AttackGrid {
    /// Cells in (method, norm, ε) order.
    pub fn cells(&self) -> Vec<(Method, Norm, f64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &n in &self.norms {
                for &e in &self.epsilons {
                    out.push((m, n, e));
                }
            }
        }
        out
    }

    pub fn attack(&self, method: Method, norm: Norm, epsilon: f64, seed: u64) -> AttackConfig {
        let base = match method {
            Method::Fgsm => AttackConfig::fgsm(norm, epsilon),
            Method::Pgd => AttackConfig::pgd(norm, epsilon, self.pgd_steps),
        };
        AttackConfig {
            alpha: if method == Method::Pgd { self.alpha } else { None },
            ..base.with_seed(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.norms.is_empty() || self.epsilons.is_empty() {
            return Err(config_err("attack grid needs at least one method, norm and epsilon"));
        }
        for &(m, n, e) in &self.cells() {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(config_err(format!("epsilon {e} must be finite and non-negative")));
            }
            if e > 0.0 {
                self.attack(m, n, e, 0).validate()?;
            }
        }
        Ok(())
    }
}

/// Optional caps on dataset sizes (first `n` samples).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Subsets {
    pub train: Option<usize>,
    pub test: Option<usize>,
    /// Test samples to attack; defaults to the whole (capped) test set.
    pub attack: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetName,
    /// Pair architecture (pair kinds, dverge, corr-analysis).
    pub architecture: Architecture,
    /// DNA variants to train (dna kind).
    pub unshared: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Pair or DNA training; `seed` is replaced per run.
    pub train: TrainConfig,
    /// Classifiers on reconstructions (dna kind).
    pub classifier: TrainConfig,
    pub attacks: AttackGrid,
    /// Squared parameter distances (pair-distance kind).
    pub target_distances: Vec<f64>,
    pub dverge: DvergeConfig,
    pub subsets: Subsets,
    /// Dataset root; `null` uses `$DECORR_DATA_DIR` or `./data`.
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(ExperimentKind::PairDecorrelated)
    }
}

fn config_err(msg: impl Into<String>) -> FormatError {
    Error::Config(msg.into()).into()
}

impl ExperimentConfig {
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            kind,
            dataset: DatasetName::Mnist,
            architecture: Architecture::Fc,
            unshared: vec![2, 4, 6],
            seeds: vec![1, 2, 3],
            train: TrainConfig::pair_decorrelated(),
            classifier: TrainConfig::classifier(),
            attacks: AttackGrid::default(),
            target_distances: vec![1000.0, 1500.0, 2000.0, 2500.0, 3000.0],
            dverge: DvergeConfig::default(),
            subsets: Subsets::default(),
            data_dir: None,
            out: PathBuf::from("runs").join(kind.as_str()),
        };
        match kind {
            ExperimentKind::PairDistance => {
                c.architecture = Architecture::Cnn;
                c.train = TrainConfig::pair_distance();
                c.attacks.methods = vec![Method::Fgsm];
                c.attacks.norms = vec![Norm::Linf];
            }
            ExperimentKind::PairDecorrelated => {}
            ExperimentKind::Dna => {
                c.train = TrainConfig::dna_mnist();
                c.attacks.methods = vec![Method::Pgd];
                c.attacks.norms = vec![Norm::Linf];
                c.attacks.epsilons = vec![0.05, 0.1, 0.15];
            }
            ExperimentKind::Dverge => {
                c.attacks.methods = vec![Method::Fgsm];
                c.attacks.norms = vec![Norm::Linf];
            }
            ExperimentKind::CorrAnalysis => {
                c.attacks.epsilons = vec![0.1];
                c.attacks.methods = vec![Method::Fgsm];
                c.attacks.norms = vec![Norm::Linf];
            }
        }
        c
    }

    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            // serde_json reports 1-based line/column; turn that into a byte offset
            let off = text
                .split_inclusive('\n')
                .take(e.line().saturating_sub(1))
                .map(str::len)
                .sum::<usize>()
                + e.column().saturating_sub(1);
            FormatError::parse(file, off, e.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| FormatError::parse(&label(path), e.valid_up_to(), "config is not UTF-8"))?;
        Self::from_json(text, &label(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(crate::datasets::data_dir)
    }

    pub fn dna_spec(&self, unshared: usize) -> Result<DnaSpec> {
        Ok(match self.dataset {
            DatasetName::Mnist | DatasetName::Blobs => build_dna_mnist(unshared)?,
            DatasetName::Cifar10 | DatasetName::BlobsCifar => {
                if unshared != 2 {
                    return Err(config_err("the color-image autoencoder only supports unshared = 2"));
                }
                build_dna_cifar()
            }
        })
    }

    /// Single-neck baseline built from the same fragments as the DNA.
    pub fn autoencoder_spec(&self) -> Result<ModelSpec> {
        Ok(build_autoencoder_baseline(&self.dna_spec(2)?))
    }

    pub fn eval_classifier_spec(&self) -> ModelSpec {
        if self.is_color() {
            build_eval_classifier_cifar()
        } else {
            build_eval_classifier_mnist()
        }
    }

    fn is_color(&self) -> bool {
        matches!(self.dataset, DatasetName::Cifar10 | DatasetName::BlobsCifar)
    }

    /// Schema-level checks plus existence of the data directory for file
    /// backed datasets.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(config_err("seeds must be distinct"));
        }
        self.attacks.validate()?;
        for t in [&self.train, &self.classifier] {
            if t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) || !t.lambda.is_finite() {
                return Err(config_err("training configs need positive epochs, batch size and learning rate"));
            }
        }
        match self.kind {
            ExperimentKind::PairDistance => {
                if self.target_distances.is_empty() || self.target_distances.iter().any(|d| !(*d > 0.0)) {
                    return Err(config_err("target distances must be positive and non-empty"));
                }
            }
            ExperimentKind::Dna => {
                if self.unshared.is_empty() {
                    return Err(config_err("dna runs need at least one unshared value"));
                }
                for &u in &self.unshared {
                    self.dna_spec(u)?.validate()?;
                }
            }
            _ => {}
        }
        if matches!(self.subsets.train, Some(0)) || matches!(self.subsets.test, Some(0)) {
            return Err(config_err("subset sizes must be positive"));
        }
        if matches!(self.dataset, DatasetName::Mnist | DatasetName::Cifar10) {
            let root = self.data_root();
            if !root.is_dir() {
                return Err(FormatError::Io {
                    path: root,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory does not exist"),
                });
            }
        }
        Ok(())
    }
}
