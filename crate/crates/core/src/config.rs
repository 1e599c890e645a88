//! Experiment configuration shared by the engine and the runner.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::StreamSpec;
use crate::error::{Error, Result};

/// Training protocol. The baselines only change configuration flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Tfmoe,
    /// Trained on the first task only.
    Static,
    /// Trained on new nodes only; consolidation, sampling and replay off.
    Expansible,
    /// Trained on every node of every task.
    Retrained,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Tfmoe, Protocol::Static, Protocol::Expansible, Protocol::Retrained];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tfmoe => "tfmoe",
            Protocol::Static => "static",
            Protocol::Expansible => "expansible",
            Protocol::Retrained => "retrained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Protocol::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where task data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Directory holding `flows.csv` and optionally `tasks.csv`/`calendar.csv`.
    Csv {
        path: PathBuf,
        bin_minutes: usize,
    },
    Synthetic(StreamSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(StreamSpec::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub pretrain: f64,
    pub reconstructor: f64,
    pub predictor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { pretrain: 1e-3, reconstructor: 1e-4, predictor: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seed: u64,
    /// Number of experts `K`.
    pub num_experts: usize,
    /// Latent width of the pre-training autoencoder.
    pub pretrain_latent: usize,
    pub pretrain_hidden: [usize; 2],
    /// Latent width of each expert's reconstructor.
    pub latent: usize,
    pub reconstructor_hidden: [usize; 2],
    /// Node embedding width of the graph learner.
    pub embed: usize,
    pub diffusion_steps: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    /// Weight of the clustering loss during pre-training.
    pub alpha: f64,
    /// Weight of the ELBO term in the task objective.
    pub beta: f64,
    /// Keep the ELBO term on localized groups after the first task.
    pub consolidation: bool,
    pub sampling: bool,
    pub replay: bool,
    /// Synthetic nodes per task as a fraction of the current node count.
    pub sample_fraction: f64,
    /// Replayed nodes per task as a fraction of the current node count.
    pub replay_fraction: f64,
    pub pretrain_epochs: usize,
    pub dec_epochs: usize,
    pub reconstructor_epochs: usize,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    /// Horizon steps reported by the metrics (1-based).
    pub horizons: Vec<usize>,
    /// MAPE ignores targets with magnitude at or below this value.
    pub mape_epsilon: f64,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Tfmoe,
            seed: 0,
            num_experts: 4,
            pretrain_latent: 32,
            pretrain_hidden: [128, 64],
            latent: 32,
            reconstructor_hidden: [128, 64],
            embed: 32,
            diffusion_steps: 1,
            input_steps: 12,
            output_steps: 12,
            alpha: 1e-4,
            beta: 0.1,
            consolidation: true,
            sampling: true,
            replay: true,
            sample_fraction: 0.09,
            replay_fraction: 0.01,
            pretrain_epochs: 200,
            dec_epochs: 100,
            reconstructor_epochs: 200,
            epochs_first: 50,
            epochs_later: 10,
            batch_size: 128,
            lr: LearningRates::default(),
            horizons: vec![3, 6, 12],
            mape_epsilon: 1.0,
            data: DataSource::default(),
        }
    }
}

/// Behaviour of the task loop after the protocol has been applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskPolicy {
    /// Train at all after the first task.
    pub train_later: bool,
    /// Train on every current node instead of new plus replayed nodes.
    pub pool_all: bool,
    /// ELBO weight after the first task.
    pub beta_later: f64,
    pub sample_fraction: f64,
    pub replay_fraction: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_experts == 0 {
            return bad("num_experts must be at least 1");
        }
        for (name, f) in [("sample_fraction", self.sample_fraction), ("replay_fraction", self.replay_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if [self.pretrain_latent, self.latent, self.embed, self.diffusion_steps, self.input_steps, self.batch_size].contains(&0)
            || self.pretrain_hidden.contains(&0)
            || self.reconstructor_hidden.contains(&0)
        {
            return bad("layer widths, steps and batch size must be positive");
        }
        if self.input_steps != self.output_steps {
            return Err(Error::Config(format!("input_steps ({}) must equal output_steps ({})", self.input_steps, self.output_steps)));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > self.output_steps) {
            return Err(Error::Config(format!("horizons {:?} must lie in 1..={}", self.horizons, self.output_steps)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.mape_epsilon >= 0.0) {
            return bad("alpha, beta and mape_epsilon must be non-negative");
        }
        let lr = self.lr;
        if !(lr.pretrain > 0.0 && lr.reconstructor > 0.0 && lr.predictor > 0.0) {
            return bad("learning rates must be positive");
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn policy(&self) -> TaskPolicy {
        let mut p = TaskPolicy {
            train_later: true,
            pool_all: false,
            beta_later: if self.consolidation { self.beta } else { 0.0 },
            sample_fraction: if self.sampling { self.sample_fraction } else { 0.0 },
            replay_fraction: if self.replay { self.replay_fraction } else { 0.0 },
        };
        match self.protocol {
            Protocol::Tfmoe => {}
            Protocol::Static => p.train_later = false,
            Protocol::Expansible => {
                p.beta_later = 0.0;
                p.sample_fraction = 0.0;
                p.replay_fraction = 0.0;
            }
            Protocol::Retrained => {
                p.pool_all = true;
                p.sample_fraction = 0.0;
                p.replay_fraction = 0.0;
            }
        }
        p
    }

    /// Parses TOML (or JSON when the extension is `.json`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg: ExperimentConfig = parsed.map_err(|msg| Error::Parse { path: path.to_path_buf(), msg })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Top-level keys present in a configuration file.
    pub fn keys_in_file(path: &Path) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path)?;
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), msg };
        let keys = if path.extension().is_some_and(|e| e == "json") {
            match serde_json::from_str::<serde_json::Value>(&text).map_err(|e| parse_err(e.to_string()))? {
                serde_json::Value::Object(m) => m.keys().cloned().collect(),
                _ => return Err(parse_err("top level is not an object".into())),
            }
        } else {
            toml::from_str::<toml::Table>(&text).map_err(|e| parse_err(e.to_string()))?.keys().cloned().collect()
        };
        Ok(keys)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
