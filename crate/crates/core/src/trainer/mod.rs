//! Pre-training and fine-tuning loops, the optimiser and schedule, metrics
//! logging and Dice evaluation.

mod finetune;
mod metrics;
mod optim;
mod pretrain;

pub use finetune::{
    dice, evaluate, finetune, fold_split, predict_volume, segmentation_loss, supervised_subset, FinetuneOutcome,
    FoldSplit,
};
pub use metrics::{EvalRow, MetricsLog, StepRow};
pub use optim::{adamw_step, cosine_lr, OptimConfig, OptimState};
pub use pretrain::{pretrain, pretrain_step, PretrainOutcome, StepInputs};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentConfig, LoadedDataset};
use crate::data::{CorpusConfig, DataError, DatasetManifest};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ModelError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("supervised subset is empty ({0})")]
    EmptySubset(String),
}

impl TrainError {
    /// True for problems with the user's input rather than the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::EmptySubset(_))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            checkpoint_every: 0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: u64,
    /// Share of the training pool whose labels are used, in (0, 1].
    pub label_fraction: f64,
    pub folds: usize,
    pub fold: usize,
    pub batch: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Pre-trained checkpoint whose encoder initialises the model.
    pub init: Option<PathBuf>,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            label_fraction: 1.0,
            folds: 5,
            fold: 0,
            batch: 2,
            eval_every: 0,
            init: None,
            optim: OptimConfig::default(),
        }
    }
}

/// Everything a run needs, read from one TOML file. Every field has a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory holding one sub-directory (with `manifest.toml`) per dataset.
    pub data_dir: PathBuf,
    pub output: PathBuf,
    pub pretrain_datasets: Vec<String>,
    pub target_dataset: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            pretrain_datasets: vec!["bright".into(), "mixed".into()],
            target_dataset: "target".into(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| TrainError::Config(m);
        self.model.validate().map_err(|e| c(format!("model: {e}")))?;
        self.corpus.validate().map_err(|e| c(format!("corpus: {e}")))?;
        self.augment.validate().map_err(c)?;
        self.loss.weights.validate().map_err(|e| c(format!("loss: {e}")))?;
        self.pretrain.optim.validate().map_err(|e| c(format!("pretrain.{e}")))?;
        self.finetune.optim.validate().map_err(|e| c(format!("finetune.{e}")))?;
        if self.model.patch != self.corpus.patch_extent {
            return Err(c(format!(
                "model.patch = {} differs from corpus.patch_extent = {}",
                self.model.patch, self.corpus.patch_extent
            )));
        }
        if self.loss.label_layer >= self.model.layers {
            return Err(c(format!(
                "loss.label_layer = {} but the model has {} layers",
                self.loss.label_layer, self.model.layers
            )));
        }
        if let Some(&l) = self.loss.identity_layers.iter().find(|&&l| l >= self.model.layers) {
            return Err(c(format!("loss.identity_layers contains {l}, beyond the model's layers")));
        }
        if self.loss.sample_budget == 0 {
            return Err(c("loss.sample_budget must be at least 1".into()));
        }
        if !(self.loss.weight_mu > 0.0 && self.loss.weight_epsilon >= 0.0) {
            return Err(c("loss.weight_mu must be positive and loss.weight_epsilon non-negative".into()));
        }
        let f = self.finetune.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(c(format!("finetune.label_fraction = {f} must lie in (0, 1]")));
        }
        if self.finetune.folds < 2 || self.finetune.fold >= self.finetune.folds {
            return Err(c(format!(
                "finetune.fold = {} must be below finetune.folds = {} (at least 2)",
                self.finetune.fold, self.finetune.folds
            )));
        }
        if self.finetune.batch == 0 {
            return Err(c("finetune.batch must be at least 1".into()));
        }
        if self.pretrain.iterations == 0 || self.finetune.iterations == 0 {
            return Err(c("pretrain.iterations and finetune.iterations must be positive".into()));
        }
        if self.pretrain_datasets.is_empty() {
            return Err(c("pretrain_datasets is empty".into()));
        }
        if self.pretrain_datasets.contains(&self.target_dataset) {
            return Err(c(format!(
                "target dataset '{}' is also listed in pretrain_datasets",
                self.target_dataset
            )));
        }
        Ok(())
    }

    pub fn manifest_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(id).join("manifest.toml")
    }

    pub fn load_dataset(&self, id: &str) -> Result<LoadedDataset> {
        let m = DatasetManifest::load(self.manifest_path(id))?;
        if m.id != id {
            return Err(TrainError::Config(format!(
                "manifest {} declares id '{}', expected '{id}'",
                self.manifest_path(id).display(),
                m.id
            )));
        }
        Ok(LoadedDataset::from_manifest(&m)?)
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn prepare_output(dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(io_err(&p))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[finetune]\nlabel_fraction = 0.1\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.finetune.label_fraction, 0.1);
        assert_eq!(c.finetune.iterations, 2000);
        assert_eq!(c.pretrain.optim.lr, 1e-4);
    }

    #[test]
    fn errors_name_the_key() {
        let e = ExperimentConfig::from_toml("[finetune]\nlabel_fraction = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("finetune.label_fraction"), "{e}");
        let e = ExperimentConfig::from_toml("[model]\nwidth = 3\n").unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
        let e = ExperimentConfig::from_toml("target_dataset = \"bright\"\n").unwrap_err();
        assert!(e.to_string().contains("pretrain_datasets"), "{e}");
        assert!(e.is_validation());
    }
}
