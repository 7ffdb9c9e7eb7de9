//! Experiment configuration: environment, training and channel sections,
//! read from TOML with per-environment defaults and unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::env::{EnvConfig, EnvKind};
use crate::error::ComixError;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetUpdate {
    /// Every `target_update_interval` environment steps.
    Steps,
    /// Every `target_update_episodes` episodes.
    Episodes,
}

/// Form of the coordinator loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveForm {
    /// Weighted likelihood of the executed (hardened) mask:
    /// `sum_j c_ij p_ij + (1 - c_ij)(1 - p_ij)`.
    Selection,
    /// Weighted sum of accept probabilities, `sum_j p_ij`.
    Literal,
}

/// How the alternative subset enters its forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplementMode {
    /// `1 - c`, thresholded like the execution mask.
    Hard,
    /// `1 - p` used as soft averaging weights.
    Soft,
}

/// Per-term penalty of the TD loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdError {
    /// `|y - Q_TOT|`
    Absolute,
    /// `(y - Q_TOT)^2`
    Squared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub recurrent_steps: usize,
    pub q_update_interval: usize,
    pub coord_update_interval: usize,
    pub target_update: TargetUpdate,
    pub target_update_interval: usize,
    pub target_update_episodes: usize,
    pub lr_q: f64,
    pub lr_coord: f64,
    pub weight_decay: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    /// Listed with the optimizer settings; plain RMSprop has no momentum term.
    pub beta1: f64,
    pub buffer_min: usize,
    pub buffer_max: usize,
    pub episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which epsilon decays linearly.
    pub epsilon_anneal: f64,
    pub hidden: usize,
    pub coord_hidden: usize,
    pub mixer_embed: usize,
    pub mixer_hidden: usize,
    pub communication: bool,
    pub contrastive: ContrastiveForm,
    pub complement: ComplementMode,
    pub td_error: TdError,
    pub checkpoint_interval: usize,
    /// Greedy evaluation episodes per evaluation point of fine-tuning.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        let (recurrent_steps, buffer_min, episodes) = match kind {
            EnvKind::Switch => (2, 1000, 3000),
            EnvKind::Transport => (2, 5000, 3000),
            EnvKind::PredatorPrey => (10, 5000, 1500),
        };
        Self {
            gamma: 0.99,
            batch_size: 512,
            recurrent_steps,
            q_update_interval: 50,
            coord_update_interval: 50,
            target_update: TargetUpdate::Steps,
            target_update_interval: 20000,
            target_update_episodes: 100,
            lr_q: 1e-4,
            lr_coord: 5e-5,
            weight_decay: 1e-5,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            beta1: 0.9,
            buffer_min,
            buffer_max: 20000,
            episodes,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 0.5,
            hidden: 128,
            coord_hidden: 128,
            mixer_embed: 32,
            mixer_hidden: 16,
            communication: true,
            contrastive: ContrastiveForm::Selection,
            complement: ComplementMode::Hard,
            td_error: TdError::Absolute,
            checkpoint_interval: 500,
            eval_episodes: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ComixError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("recurrent_steps", self.recurrent_steps),
            ("q_update_interval", self.q_update_interval),
            ("coord_update_interval", self.coord_update_interval),
            ("target_update_interval", self.target_update_interval),
            ("target_update_episodes", self.target_update_episodes),
            ("buffer_max", self.buffer_max),
            ("hidden", self.hidden),
            ("coord_hidden", self.coord_hidden),
            ("mixer_embed", self.mixer_embed),
            ("mixer_hidden", self.mixer_hidden),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ComixError::Config(format!("train.{name} must be positive")));
            }
        }
        let unit = [
            ("gamma", self.gamma),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_anneal", self.epsilon_anneal),
            ("rms_alpha", self.rms_alpha),
            ("beta1", self.beta1),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(ComixError::Config(format!("train.{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, v) in [("lr_q", self.lr_q), ("lr_coord", self.lr_coord), ("weight_decay", self.weight_decay), ("rms_eps", self.rms_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ComixError::Config(format!("train.{name} = {v} must be finite and non-negative")));
            }
        }
        if self.buffer_min > self.buffer_max {
            return Err(ComixError::Config(format!(
                "train.buffer_min {} exceeds train.buffer_max {}",
                self.buffer_min, self.buffer_max
            )));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_anneal` of the budget, constant afterwards.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = self.epsilon_anneal * self.episodes as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn default_for(kind: EnvKind) -> Self {
        Self {
            env: EnvConfig::default_for(kind),
            train: TrainConfig::for_env(kind),
            channel: ChannelConfig::default(),
            output_dir: PathBuf::from("runs").join(kind.name()),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    /// Parses TOML text. Missing keys take the defaults of the environment
    /// named by `env.kind` (Switch when absent); unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self, ComixError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ComixError::Config(e.to_string()))?;
        let kind = match user.get("env").and_then(|e| e.get("kind")) {
            Some(v) => EnvKind::deserialize(v.clone())
                .map_err(|e| ComixError::Config(format!("env.kind: {e}")))?,
            None => EnvKind::Switch,
        };
        let mut base = toml::Table::try_from(Self::default_for(kind))
            .map_err(|e| ComixError::Config(e.to_string()))?;
        merge(&mut base, user, "")?;
        let cfg = Self::deserialize(toml::Value::Table(base)).map_err(|e| ComixError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ComixError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ComixError::Config(msg) => ComixError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String, ComixError> {
        toml::to_string(self).map_err(|e| ComixError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ComixError> {
        self.env.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        if self.seeds.is_empty() {
            return Err(ComixError::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.env.agents, self.env.obs_width);
        m.agent.hidden = self.train.hidden;
        m.agent.feature_width = self.train.hidden;
        m.agent.encoder_width = self.train.hidden;
        m.agent.coord_hidden = self.train.hidden;
        m.coord_hidden = self.train.coord_hidden;
        m.coord_mlp = self.train.coord_hidden;
        m.mixer_embed = self.train.mixer_embed;
        m.mixer_hidden = self.train.mixer_hidden;
        m.communication = self.train.communication;
        m
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String, ComixError> {
        let text = self.to_toml_string()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, path: &str) -> Result<(), ComixError> {
    for (key, value) in user {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &full)?,
            (Some(_), toml::Value::Table(_)) => {
                return Err(ComixError::Config(format!("{full}: expected a value, found a table")));
            }
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(ComixError::Config(format!("unknown key `{full}`"))),
        }
    }
    Ok(())
}
