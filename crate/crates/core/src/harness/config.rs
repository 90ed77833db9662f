//! Flat `key = value` scenario configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::derive_seed;
use crate::model::TrainConfig;
use crate::netsim::{Disconnect, MemoryMode, NetConfig};
use crate::protocol::{Departure, EpsilonMode, SyncMode};
use crate::AgentId;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, e.to_string()))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, "expected true or false")),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalIterations {
    Steps(usize),
    /// Enough steps to pass once over the agent's shard.
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    /// Gaussian class blobs. `dimension` counts the trailing bias feature.
    Synthetic {
        classes: usize,
        samples: usize,
        dimension: usize,
        separation: f64,
    },
    /// IDX image/label pair, relative paths resolved against the data dir.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        subsample: Option<usize>,
        eval_images: Option<PathBuf>,
        eval_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub agents: u32,
    pub partitions: u32,
    pub pi: u32,
    pub rho: u32,
    pub alpha: f64,
    pub inverse_r: bool,
    pub rounds: u32,
    pub sync_mode: SyncMode,
    pub round_timeout_ms: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_iterations: LocalIterations,
    pub train_seed: Option<u64>,
    pub hidden: Vec<usize>,
    pub model_seed: Option<u64>,
    pub latency_mean_ms: f64,
    pub latency_jitter_ms: f64,
    pub drop_prob: f64,
    pub net_seed: Option<u64>,
    pub disconnects: Vec<Disconnect>,
    pub dataset: DatasetConfig,
    pub dataset_seed: Option<u64>,
    pub eval_fraction: f64,
    pub storage_zero: Vec<AgentId>,
    pub leaves: Vec<Departure>,
    pub per_agent: bool,
    pub baseline: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            agents: 4,
            partitions: 4,
            pi: 1,
            rho: 1,
            alpha: 0.5,
            inverse_r: false,
            rounds: 20,
            sync_mode: SyncMode::Synchronous,
            round_timeout_ms: 1000.0,
            seed: 1,
            learning_rate: 0.1,
            batch_size: 16,
            local_iterations: LocalIterations::Steps(5),
            train_seed: None,
            hidden: vec![16],
            model_seed: None,
            latency_mean_ms: 20.0,
            latency_jitter_ms: 10.0,
            drop_prob: 0.0,
            net_seed: None,
            disconnects: Vec::new(),
            dataset: DatasetConfig::Synthetic {
                classes: 3,
                samples: 1200,
                dimension: 11,
                separation: 3.0,
            },
            dataset_seed: None,
            eval_fraction: 0.2,
            storage_zero: Vec::new(),
            leaves: Vec::new(),
            per_agent: false,
            baseline: false,
        }
    }
}

fn parse_disconnects(key: &str, value: &str) -> Result<Vec<Disconnect>, ConfigError> {
    let mut out = Vec::new();
    for item in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad(key, format!("`{item}`: expected agent:from-to[:memory|memoryless]")));
        }
        let (from, to) = parts[1]
            .split_once('-')
            .ok_or_else(|| bad(key, format!("`{item}`: expected a round range")))?;
        let memory = match parts.get(2).copied().unwrap_or("memory") {
            "memory" => MemoryMode::WithMemory,
            "memoryless" => MemoryMode::Memoryless,
            other => return Err(bad(key, format!("unknown memory mode `{other}`"))),
        };
        let d = Disconnect {
            agent: AgentId(num(key, parts[0])?),
            from_round: num(key, from)?,
            to_round: num(key, to)?,
            memory,
        };
        if d.to_round < d.from_round {
            return Err(bad(key, format!("`{item}`: empty round range")));
        }
        out.push(d);
    }
    Ok(out)
}

fn parse_leaves(key: &str, value: &str) -> Result<Vec<Departure>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (agent, round) = item
                .split_once('@')
                .ok_or_else(|| bad(key, format!("`{item}`: expected agent@round")))?;
            Ok(Departure {
                agent: AgentId(num(key, agent)?),
                round: num(key, round)?,
            })
        })
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl ScenarioConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Used by both the file parser and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "name" => self.name = value.to_string(),
            "agents" => self.agents = num(key, value)?,
            "partitions" => self.partitions = num(key, value)?,
            "pi" => self.pi = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "epsilon" => {
                self.inverse_r = match value {
                    "ema" => false,
                    "inverse-r" => true,
                    _ => return Err(bad(key, "expected ema or inverse-r")),
                }
            }
            "rounds" => self.rounds = num(key, value)?,
            "sync_mode" => {
                self.sync_mode = match value {
                    "synchronous" | "sync" => SyncMode::Synchronous,
                    "asynchronous" | "async" => SyncMode::Asynchronous,
                    _ => return Err(bad(key, "expected synchronous or asynchronous")),
                }
            }
            "round_timeout_ms" => self.round_timeout_ms = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train.learning_rate" => self.learning_rate = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.local_iterations" => {
                self.local_iterations = match value {
                    "epoch" => LocalIterations::Epoch,
                    _ => LocalIterations::Steps(num(key, value)?),
                }
            }
            "train.seed" => self.train_seed = Some(num(key, value)?),
            "model.hidden" => self.hidden = list(key, value)?,
            "model.seed" => self.model_seed = Some(num(key, value)?),
            "net.latency_mean_ms" => self.latency_mean_ms = num(key, value)?,
            "net.latency_jitter_ms" => self.latency_jitter_ms = num(key, value)?,
            "net.drop_prob" => self.drop_prob = num(key, value)?,
            "net.seed" => self.net_seed = Some(num(key, value)?),
            "net.disconnect" => self.disconnects = parse_disconnects(key, value)?,
            "dataset.kind" => {
                self.dataset = match value {
                    "synthetic" => Self::default().dataset,
                    "idx" => DatasetConfig::Idx {
                        images: "train-images-idx3-ubyte".into(),
                        labels: "train-labels-idx1-ubyte".into(),
                        classes: 10,
                        subsample: None,
                        eval_images: None,
                        eval_labels: None,
                    },
                    _ => return Err(bad(key, "expected synthetic or idx")),
                }
            }
            "dataset.seed" => self.dataset_seed = Some(num(key, value)?),
            "dataset.classes" => match &mut self.dataset {
                DatasetConfig::Synthetic { classes, .. } | DatasetConfig::Idx { classes, .. } => {
                    *classes = num(key, value)?
                }
            },
            "dataset.samples" | "dataset.dimension" | "dataset.separation" => {
                let DatasetConfig::Synthetic {
                    samples,
                    dimension,
                    separation,
                    ..
                } = &mut self.dataset
                else {
                    return Err(bad(key, "only valid for dataset.kind = synthetic"));
                };
                match key {
                    "dataset.samples" => *samples = num(key, value)?,
                    "dataset.dimension" => *dimension = num(key, value)?,
                    _ => *separation = num(key, value)?,
                }
            }
            "dataset.images" | "dataset.labels" | "dataset.subsample" | "dataset.eval_images"
            | "dataset.eval_labels" => {
                let DatasetConfig::Idx {
                    images,
                    labels,
                    subsample,
                    eval_images,
                    eval_labels,
                    ..
                } = &mut self.dataset
                else {
                    return Err(bad(key, "only valid for dataset.kind = idx"));
                };
                match key {
                    "dataset.images" => *images = value.into(),
                    "dataset.labels" => *labels = value.into(),
                    "dataset.eval_images" => *eval_images = Some(value.into()),
                    "dataset.eval_labels" => *eval_labels = Some(value.into()),
                    _ => *subsample = Some(num(key, value)?),
                }
            }
            "eval_fraction" => self.eval_fraction = num(key, value)?,
            "storage.zero" => self.storage_zero = list::<u32>(key, value)?.into_iter().map(AgentId).collect(),
            "leave" => self.leaves = parse_leaves(key, value)?,
            "output.per_agent" => self.per_agent = flag(key, value)?,
            "baseline" => self.baseline = flag(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.agents == 0 {
            return invalid("agents must be >= 1".into());
        }
        if self.partitions == 0 || self.pi == 0 || self.pi > self.partitions {
            return invalid(format!(
                "need 1 <= pi <= partitions, got pi={} partitions={}",
                self.pi, self.partitions
            ));
        }
        if self.rho == 0 {
            return invalid("rho must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.round_timeout_ms.is_nan() || self.round_timeout_ms <= 0.0 {
            return invalid("round_timeout_ms must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return invalid(format!("eval_fraction must lie in [0, 1), got {}", self.eval_fraction));
        }
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return invalid("train.batch_size and train.learning_rate must be positive".into());
        }
        if self.local_iterations == LocalIterations::Steps(0) {
            return invalid("train.local_iterations must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return invalid("model.hidden layers must be non-empty".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                samples,
                dimension,
                separation,
            } => {
                if *classes < 2 || *dimension < 2 || *samples == 0 || separation.is_nan() || *separation < 0.0 {
                    return invalid(
                        "synthetic dataset needs classes >= 2, dimension >= 2, samples >= 1".into(),
                    );
                }
            }
            DatasetConfig::Idx { classes, .. } => {
                if *classes < 2 {
                    return invalid("dataset.classes must be >= 2".into());
                }
            }
        }
        for a in self
            .disconnects
            .iter()
            .map(|d| d.agent)
            .chain(self.leaves.iter().map(|d| d.agent))
            .chain(self.storage_zero.iter().copied())
        {
            if a.0 == 0 || a.0 > self.agents {
                return invalid(format!("agent {a} referenced but only {} agents exist", self.agents));
            }
        }
        self.net_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn effective_seed(&self, explicit: Option<u64>, tag: u64) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.seed, &[tag]))
    }

    pub fn train_seed(&self) -> u64 {
        self.effective_seed(self.train_seed, 1)
    }

    pub fn model_seed(&self) -> u64 {
        self.effective_seed(self.model_seed, 2)
    }

    pub fn net_seed(&self) -> u64 {
        self.effective_seed(self.net_seed, 3)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.effective_seed(self.dataset_seed, 4)
    }

    pub fn epsilon_mode(&self) -> EpsilonMode {
        if self.inverse_r {
            EpsilonMode::InverseR
        } else {
            EpsilonMode::Ema { alpha: self.alpha }
        }
    }

    /// Training settings for shards of `shard_len` samples.
    pub fn train_config(&self, shard_len: usize) -> TrainConfig {
        let local_iterations = match self.local_iterations {
            LocalIterations::Steps(n) => n,
            LocalIterations::Epoch => shard_len.div_ceil(self.batch_size).max(1),
        };
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_iterations,
            seed: self.train_seed(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            latency_mean_ms: self.latency_mean_ms,
            latency_jitter_ms: self.latency_jitter_ms,
            drop_prob: self.drop_prob,
            seed: self.net_seed(),
            disconnects: self.disconnects.clone(),
        }
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("agents", self.agents.to_string());
        kv("partitions", self.partitions.to_string());
        kv("pi", self.pi.to_string());
        kv("rho", self.rho.to_string());
        kv("alpha", self.alpha.to_string());
        kv("epsilon", if self.inverse_r { "inverse-r" } else { "ema" }.into());
        kv("rounds", self.rounds.to_string());
        kv(
            "sync_mode",
            match self.sync_mode {
                SyncMode::Synchronous => "synchronous",
                SyncMode::Asynchronous => "asynchronous",
            }
            .into(),
        );
        kv("round_timeout_ms", self.round_timeout_ms.to_string());
        kv("seed", self.seed.to_string());
        kv("train.learning_rate", self.learning_rate.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv(
            "train.local_iterations",
            match self.local_iterations {
                LocalIterations::Steps(n) => n.to_string(),
                LocalIterations::Epoch => "epoch".into(),
            },
        );
        if let Some(v) = self.train_seed {
            kv("train.seed", v.to_string());
        }
        kv("model.hidden", join(&self.hidden, ","));
        if let Some(v) = self.model_seed {
            kv("model.seed", v.to_string());
        }
        kv("net.latency_mean_ms", self.latency_mean_ms.to_string());
        kv("net.latency_jitter_ms", self.latency_jitter_ms.to_string());
        kv("net.drop_prob", self.drop_prob.to_string());
        if let Some(v) = self.net_seed {
            kv("net.seed", v.to_string());
        }
        if !self.disconnects.is_empty() {
            kv(
                "net.disconnect",
                join(
                    self.disconnects
                        .iter()
                        .map(|d| format!("{}:{}-{}:{}", d.agent, d.from_round, d.to_round, d.memory)),
                    ";",
                ),
            );
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                samples,
                dimension,
                separation,
            } => {
                kv("dataset.kind", "synthetic".into());
                kv("dataset.classes", classes.to_string());
                kv("dataset.samples", samples.to_string());
                kv("dataset.dimension", dimension.to_string());
                kv("dataset.separation", separation.to_string());
            }
            DatasetConfig::Idx {
                images,
                labels,
                classes,
                subsample,
                eval_images,
                eval_labels,
            } => {
                kv("dataset.kind", "idx".into());
                kv("dataset.images", images.display().to_string());
                kv("dataset.labels", labels.display().to_string());
                kv("dataset.classes", classes.to_string());
                if let Some(n) = subsample {
                    kv("dataset.subsample", n.to_string());
                }
                if let Some(p) = eval_images {
                    kv("dataset.eval_images", p.display().to_string());
                }
                if let Some(p) = eval_labels {
                    kv("dataset.eval_labels", p.display().to_string());
                }
            }
        }
        if let Some(v) = self.dataset_seed {
            kv("dataset.seed", v.to_string());
        }
        kv("eval_fraction", self.eval_fraction.to_string());
        if !self.storage_zero.is_empty() {
            kv("storage.zero", join(&self.storage_zero, ","));
        }
        if !self.leaves.is_empty() {
            kv("leave", join(self.leaves.iter().map(|d| format!("{}@{}", d.agent, d.round)), ","));
        }
        kv("output.per_agent", self.per_agent.to_string());
        kv("baseline", self.baseline.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_defaults() {
        let cfg = ScenarioConfig::parse(
            "# comment\nagents = 8\nrho=2\nnet.drop_prob = 0.2 # trailing\nnet.disconnect = 5:10-15:memoryless;6:10-15\n",
        )
        .unwrap();
        assert_eq!(cfg.agents, 8);
        assert_eq!(cfg.rho, 2);
        assert_eq!(cfg.drop_prob, 0.2);
        assert_eq!(cfg.disconnects.len(), 2);
        assert_eq!(cfg.disconnects[0].memory, MemoryMode::Memoryless);
        assert_eq!(cfg.disconnects[1].memory, MemoryMode::WithMemory);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ScenarioConfig::default();
        cfg.set("leave", "3@7").unwrap();
        cfg.set("storage.zero", "2,4").unwrap();
        cfg.set("train.local_iterations", "epoch").unwrap();
        cfg.set("net.disconnect", "2:3-4:memory").unwrap();
        cfg.set("agents", "5").unwrap();
        assert_eq!(ScenarioConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ScenarioConfig::parse("nonsense"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ScenarioConfig::parse("bogus = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(ScenarioConfig::parse("agents = many").is_err());
        let cfg = ScenarioConfig { pi: 9, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig { alpha: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.set("leave", "9@2").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sub_seeds_follow_master_unless_pinned() {
        let mut a = ScenarioConfig::default();
        let b = a.clone();
        a.seed = 2;
        assert_ne!(a.train_seed(), b.train_seed());
        a.train_seed = Some(5);
        assert_eq!(a.train_seed(), 5);
        assert_ne!(a.net_seed(), a.model_seed());
    }
}
