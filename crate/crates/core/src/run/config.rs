use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdversarialConfig, TyingConfig};
use crate::autodiff::AdamConfig;
use crate::data::{NoiseChannelConfig, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{Domain, ModelConfig};

/// Which models see which data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Both domains every step, with the discriminator game when attached.
    #[default]
    Adversarial,
    /// Source model on clean data only.
    SourceOnly,
    /// Target model on noisy data only.
    TargetOnly,
    /// Source steps first, then target steps.
    Finetune,
}

impl Experiment {
    /// The model used for dev scoring and evaluation.
    pub fn eval_domain(self) -> Domain {
        match self {
            Experiment::SourceOnly => Domain::Source,
            _ => Domain::Target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        OptimizerConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    DevF1,
    DevExactMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopping {
    pub metric: StopMetric,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between dev evaluations.
    pub eval_every: usize,
    /// Share of training questions held out for dev scoring.
    pub dev_fraction: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping { metric: StopMetric::DevF1, patience: 5, eval_every: 100, dev_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub min_count: usize,
    pub max_doc_len: Option<usize>,
    pub max_q_len: Option<usize>,
    /// Source steps of a fine-tuning run; half of `max_steps` when unset.
    pub finetune_source_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Clean SQuAD-layout training corpus.
    pub source_train: Option<PathBuf>,
    /// Noisy training corpus; produced from `source_train` with the noise
    /// channel when unset.
    pub target_train: Option<PathBuf>,
    /// Corpus scored after training.
    pub test: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub log_file: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            source_train: None,
            target_train: None,
            test: None,
            checkpoint_dir: "checkpoints".into(),
            log_file: "train.jsonl".into(),
        }
    }
}

/// Everything one training run needs, as stored in a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: Experiment,
    pub max_steps: usize,
    /// Vocabulary sizes are replaced by those of the training data.
    pub model: ModelConfig,
    pub tying: TyingConfig,
    pub adversarial: AdversarialConfig,
    pub noise: NoiseChannelConfig,
    pub optimizer: OptimizerConfig,
    pub early_stopping: EarlyStopping,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            experiment: Experiment::default(),
            max_steps: 10_000,
            model: ModelConfig::default(),
            tying: TyingConfig::default(),
            adversarial: AdversarialConfig::default(),
            noise: NoiseChannelConfig::default(),
            optimizer: OptimizerConfig::default(),
            early_stopping: EarlyStopping::default(),
            data: DataConfig { min_count: 1, ..DataConfig::default() },
            paths: PathsConfig::default(),
        }
    }
}

fn field_error(field: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{field}: {msg}")),
        other => other,
    }
}

impl RunConfig {
    /// A small model with a one-block critic, for smoke runs and tests.
    pub fn toy() -> Self {
        let model = ModelConfig { hidden_dim: 16, word_dim: 16, max_span_length: 8, dropout_rate: 0.0, ..ModelConfig::tiny() };
        let mut adversarial = AdversarialConfig::default();
        adversarial.discriminator.channels = model.hidden_dim;
        adversarial.discriminator.residual_blocks = 1;
        adversarial.discriminator.filter_width = 3;
        adversarial.n_critic = 1;
        RunConfig {
            max_steps: 200,
            model,
            adversarial,
            optimizer: OptimizerConfig { lr: 5e-3, batch_size: 8, ..OptimizerConfig::default() },
            early_stopping: EarlyStopping { eval_every: 20, ..EarlyStopping::default() },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| field_error("model", e))?;
        self.adversarial
            .validate(&self.tying, &self.model)
            .map_err(|e| field_error("adversarial", e))?;
        self.noise.validate().map_err(|e| field_error("noise", e))?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if o.batch_size < 1 {
            return Err(Error::Config("optimizer.batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer: betas must lie in [0, 1) and eps be positive".into()));
        }
        let es = &self.early_stopping;
        if es.eval_every < 1 {
            return Err(Error::Config("early_stopping.eval_every must be ≥ 1".into()));
        }
        if es.patience < 1 {
            return Err(Error::Config("early_stopping.patience must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&es.dev_fraction) {
            return Err(Error::Config(format!("early_stopping.dev_fraction must lie in [0, 1), got {}", es.dev_fraction)));
        }
        if self.data.min_count < 1 {
            return Err(Error::Config("data.min_count must be ≥ 1".into()));
        }
        if self.data.max_doc_len == Some(0) || self.data.max_q_len == Some(0) {
            return Err(Error::Config("data: maximum lengths must be ≥ 1".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn finetune_switch(&self) -> usize {
        self.data.finetune_source_steps.unwrap_or(self.max_steps / 2)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Parses and validates; unknown or mistyped keys are named.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "config".into(),
            msg: e.to_string().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { path: path.display().to_string(), msg },
            other => other,
        })
    }
}
