//! Run configuration, read from TOML and echoed as JSON into run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stylerl::classifier::{ClassifierConfig, ClassifierTraining};
use stylerl::data::Direction;
use stylerl::optim::AdamConfig;
use stylerl::rewards::{BleuConfig, RewardConfig};
use stylerl::seq2seq::ModelConfig;
use stylerl::training::{Schedule, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_freq: usize,
    /// Directory holding `{train,valid,test}.{src,tgt}`; the synthetic corpus is generated when unset.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            min_freq: 1,
            corpus_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(0);
        ModelSection {
            emb_dim: d.emb_dim,
            hidden_dim: d.hidden_dim,
            max_len: d.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub emb_dim: usize,
    pub filters: usize,
    pub windows: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub token_dropout: f64,
    pub lr: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::new(0);
        let t = ClassifierTraining::default();
        ClassifierSection {
            emb_dim: c.emb_dim,
            filters: c.filters,
            windows: c.windows,
            epochs: t.epochs,
            batch_size: t.batch_size,
            token_dropout: t.token_dropout,
            lr: t.adam.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub reward_epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            reward_epochs: t.reward_epochs,
            lr: t.adam.lr,
            clip_norm: t.adam.clip_norm.unwrap_or(0.0),
            alpha: t.rewards.alpha,
            beta: t.rewards.beta,
            gamma: t.rewards.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub schedule: String,
    pub direction: Direction,
    pub data: DataSection,
    pub model: ModelSection,
    pub classifier: ClassifierSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: 7,
            out: PathBuf::from("out"),
            schedule: Schedule::TsThenCp.name().to_string(),
            direction: Direction::LowToHigh,
            data: DataSection::default(),
            model: ModelSection::default(),
            classifier: ClassifierSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            bail!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            );
        }
        let d = &self.data;
        if d.corpus_dir.is_none() && (d.n_train == 0 || d.n_valid == 0 || d.n_test == 0) {
            bail!("data.n_train, data.n_valid and data.n_test must all be at least 1");
        }
        self.schedule()?;
        let m = &self.model;
        if m.emb_dim == 0 || m.hidden_dim == 0 || m.max_len == 0 {
            bail!("model dimensions and max_len must be at least 1");
        }
        let c = &self.classifier;
        if c.emb_dim == 0 || c.filters == 0 || c.windows.is_empty() || c.windows.contains(&0) {
            bail!("classifier dimensions and windows must be at least 1");
        }
        if c.epochs == 0 || c.batch_size == 0 || !(c.lr > 0.0) {
            bail!("classifier epochs, batch_size and lr must be positive");
        }
        if !(0.0..1.0).contains(&c.token_dropout) {
            bail!("classifier.token_dropout must lie in [0, 1)");
        }
        if !(self.train.clip_norm >= 0.0) {
            bail!("train.clip_norm must be ≥ 0 (0 disables clipping)");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(self.schedule.parse::<Schedule>()?)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_dim: self.model.emb_dim,
            hidden_dim: self.model.hidden_dim,
            max_len: self.model.max_len,
        }
    }

    pub fn classifier_config(&self, vocab_size: usize) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size,
            emb_dim: self.classifier.emb_dim,
            filters: self.classifier.filters,
            windows: self.classifier.windows.clone(),
        }
    }

    pub fn classifier_training(&self) -> ClassifierTraining {
        ClassifierTraining {
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            token_dropout: self.classifier.token_dropout,
            adam: AdamConfig {
                lr: self.classifier.lr,
                ..AdamConfig::default()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            reward_epochs: t.reward_epochs,
            adam: AdamConfig {
                lr: t.lr,
                clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
                ..AdamConfig::default()
            },
            rewards: RewardConfig {
                alpha: t.alpha,
                beta: t.beta,
                gamma: t.gamma,
                direction: self.direction,
                bleu: BleuConfig::default(),
            },
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.out.join("classifier.ckpt")
    }

    pub fn run_dir(&self, schedule: Schedule) -> PathBuf {
        self.out.join("runs").join(schedule.slug())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_library_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.model_config(5), ModelConfig::new(5));
        assert_eq!(c.classifier_config(5), ClassifierConfig::new(5));
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c: RunConfig = toml::from_str(
            "config_version = 1\nseed = 3\ndirection = \"high2low\"\n[train]\nbeta = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.direction, Direction::HighToLow);
        assert_eq!(c.train.beta, 0.5);
        assert_eq!(c.train.alpha, 1.0);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.data.n_train = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.schedule = "nope".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.config_version = 9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.gamma = -1.0;
        assert!(c.validate().is_err());
    }
}
