//! Flat `key = value` run configuration over a named preset, and the run
//! manifest written next to every artifact.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::inference::EvalConfig;
use crate::policy::PolicyShape;
use crate::trainer::{BcConfig, TrainConfig};
use crate::vocab::RESERVED_TOKENS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

/// Policy sizes; the vocabulary size comes from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub recent: usize,
    pub query_slots: usize,
    pub memory_slots: usize,
    pub info_slots: usize,
    pub shared_open_class: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn shape(&self, vocab: usize) -> PolicyShape {
        PolicyShape {
            vocab,
            dim: self.dim,
            hidden: self.hidden,
            window: self.window,
            recent: self.recent,
            query_slots: self.query_slots,
            memory_slots: self.memory_slots,
            info_slots: self.info_slots,
            open_class_from: self.shared_open_class.then_some(RESERVED_TOKENS),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = PolicyShape::desk(RESERVED_TOKENS + 1);
        ModelConfig {
            dim: s.dim,
            hidden: s.hidden,
            window: s.window,
            recent: s.recent,
            query_slots: s.query_slots,
            memory_slots: s.memory_slots,
            info_slots: s.info_slots,
            shared_open_class: s.open_class_from.is_some(),
            init_seed: 1,
        }
    }
}

/// Everything a subcommand may need, filled from a preset and a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub bc: BcConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
    /// Write a checkpoint every this many updates (0: only the final one).
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = RunConfig {
            train: TrainConfig::desk(),
            bc: BcConfig::default(),
            eval: EvalConfig::default(),
            model: ModelConfig::default(),
            checkpoint_every: 50,
        };
        if p == Preset::Paper {
            cfg.train.group_size = 16;
            cfg.train.batch_size = 128;
            cfg.train.learning_rate = 1e-6;
            cfg.train.max_turns = 16;
            cfg.eval.max_turns = 16;
        }
        cfg
    }

    /// Applies `key = value` lines from `text` on top of `self`. Blank lines
    /// and `#` comments are skipped; unknown keys are errors.
    pub fn apply(mut self, text: &str) -> Result<Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                e => e,
            })?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Preset defaults overlaid with the file at `path`.
    pub fn load(path: &std::path::Path, preset: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::preset(preset).apply(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let (b, e, m) = (&mut self.bc, &mut self.eval, &mut self.model);
        match key {
            "group_size" => t.group_size = parse(key, value, "integer >= 2")?,
            "batch_size" => t.batch_size = parse(key, value, "integer >= 1")?,
            "learning_rate" => t.learning_rate = parse(key, value, "real >= 0")?,
            "clip_epsilon" => t.clip_epsilon = parse(key, value, "real in (0, 1)")?,
            "kl_beta" => t.kl_beta = parse(key, value, "real >= 0")?,
            "max_turns" => t.max_turns = parse(key, value, "integer >= 1")?,
            "epochs_per_batch" => t.epochs_per_batch = parse(key, value, "integer >= 1")?,
            "seed" => t.seed = parse(key, value, "unsigned integer")?,
            "group_mode" => t.group_mode = parse(key, value, "pooled or per_step")?,
            "updates" => t.updates = parse(key, value, "integer >= 0")?,
            "optimizer" => t.optimizer = parse(key, value, "sgd or adam")?,
            "max_grad_norm" => t.max_grad_norm = parse(key, value, "real >= 0")?,
            "context_mode" => t.context_mode = parse(key, value, "truncated, full or window:<k>")?,
            "top_k" => t.top_k = parse(key, value, "integer >= 1")?,
            "temperature" => t.temperature = parse(key, value, "real > 0")?,
            "max_new_tokens" => t.max_new_tokens = parse(key, value, "integer >= 1")?,
            "memory_credit" => t.memory_credit = parse(key, value, "true or false")?,
            "max_backtracks" => t.max_backtracks = parse(key, value, "integer >= 0")?,
            "bc_epochs" => b.epochs = parse(key, value, "integer >= 0")?,
            "bc_learning_rate" => b.learning_rate = parse(key, value, "real >= 0")?,
            "bc_batch_size" => b.batch_size = parse(key, value, "integer >= 1")?,
            "bc_optimizer" => b.optimizer = parse(key, value, "sgd or adam")?,
            "bc_seed" => b.seed = parse(key, value, "unsigned integer")?,
            "eval_max_turns" => e.max_turns = parse(key, value, "integer >= 1")?,
            "eval_top_k" => e.top_k = parse(key, value, "integer >= 1")?,
            "eval_max_new_tokens" => e.max_new_tokens = parse(key, value, "integer >= 1")?,
            "model_dim" => m.dim = parse(key, value, "integer >= 1")?,
            "model_hidden" => m.hidden = parse(key, value, "integer >= 1")?,
            "model_window" => m.window = parse(key, value, "integer >= 1")?,
            "model_recent" => m.recent = parse(key, value, "integer >= 0")?,
            "model_query_slots" => m.query_slots = parse(key, value, "integer >= 0")?,
            "model_memory_slots" => m.memory_slots = parse(key, value, "integer >= 0")?,
            "model_info_slots" => m.info_slots = parse(key, value, "integer >= 0")?,
            "model_shared_open_class" => m.shared_open_class = parse(key, value, "true or false")?,
            "model_init_seed" => m.init_seed = parse(key, value, "unsigned integer")?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value, "integer >= 0")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        let m = &self.model;
        let checks: [(&str, String, bool, &str); 17] = [
            ("group_size", t.group_size.to_string(), t.group_size >= 2, "integer >= 2"),
            ("batch_size", t.batch_size.to_string(), t.batch_size >= 1, "integer >= 1"),
            ("learning_rate", t.learning_rate.to_string(), t.learning_rate >= 0.0 && t.learning_rate.is_finite(), "real >= 0"),
            ("clip_epsilon", t.clip_epsilon.to_string(), t.clip_epsilon > 0.0 && t.clip_epsilon < 1.0, "real in (0, 1)"),
            ("kl_beta", t.kl_beta.to_string(), t.kl_beta >= 0.0 && t.kl_beta.is_finite(), "real >= 0"),
            ("max_turns", t.max_turns.to_string(), t.max_turns >= 1, "integer >= 1"),
            ("epochs_per_batch", t.epochs_per_batch.to_string(), t.epochs_per_batch >= 1, "integer >= 1"),
            ("max_grad_norm", t.max_grad_norm.to_string(), t.max_grad_norm >= 0.0 && t.max_grad_norm.is_finite(), "real >= 0"),
            ("top_k", t.top_k.to_string(), t.top_k >= 1, "integer >= 1"),
            ("temperature", t.temperature.to_string(), t.temperature > 0.0 && t.temperature.is_finite(), "real > 0"),
            ("max_new_tokens", t.max_new_tokens.to_string(), t.max_new_tokens >= 1, "integer >= 1"),
            ("bc_learning_rate", self.bc.learning_rate.to_string(), self.bc.learning_rate >= 0.0 && self.bc.learning_rate.is_finite(), "real >= 0"),
            ("bc_batch_size", self.bc.batch_size.to_string(), self.bc.batch_size >= 1, "integer >= 1"),
            ("eval_max_turns", self.eval.max_turns.to_string(), self.eval.max_turns >= 1, "integer >= 1"),
            ("eval_top_k", self.eval.top_k.to_string(), self.eval.top_k >= 1 && self.eval.max_new_tokens >= 1, "integer >= 1"),
            ("model_dim", m.dim.to_string(), m.dim >= 1 && m.hidden >= 1, "integer >= 1"),
            ("model_window", m.window.to_string(), m.window >= 1, "integer >= 1"),
        ];
        for (key, value, ok, accepted) in checks {
            if !ok {
                return Err(out_of_range(key, &value, accepted));
            }
        }
        Ok(())
    }

    /// The config as `key = value` text that [`apply`](Self::apply) reads
    /// back to an equal value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let (b, e, m) = (&self.bc, &self.eval, &self.model);
        let rows: Vec<(&str, String)> = vec![
            ("group_size", t.group_size.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", fmt_f64(t.learning_rate)),
            ("clip_epsilon", fmt_f64(t.clip_epsilon)),
            ("kl_beta", fmt_f64(t.kl_beta)),
            ("max_turns", t.max_turns.to_string()),
            ("epochs_per_batch", t.epochs_per_batch.to_string()),
            ("seed", t.seed.to_string()),
            ("group_mode", t.group_mode.to_string()),
            ("updates", t.updates.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("max_grad_norm", fmt_f64(t.max_grad_norm)),
            ("context_mode", t.context_mode.to_string()),
            ("top_k", t.top_k.to_string()),
            ("temperature", fmt_f64(t.temperature)),
            ("max_new_tokens", t.max_new_tokens.to_string()),
            ("memory_credit", t.memory_credit.to_string()),
            ("max_backtracks", t.max_backtracks.to_string()),
            ("bc_epochs", b.epochs.to_string()),
            ("bc_learning_rate", fmt_f64(b.learning_rate)),
            ("bc_batch_size", b.batch_size.to_string()),
            ("bc_optimizer", b.optimizer.to_string()),
            ("bc_seed", b.seed.to_string()),
            ("eval_max_turns", e.max_turns.to_string()),
            ("eval_top_k", e.top_k.to_string()),
            ("eval_max_new_tokens", e.max_new_tokens.to_string()),
            ("model_dim", m.dim.to_string()),
            ("model_hidden", m.hidden.to_string()),
            ("model_window", m.window.to_string()),
            ("model_recent", m.recent.to_string()),
            ("model_query_slots", m.query_slots.to_string()),
            ("model_memory_slots", m.memory_slots.to_string()),
            ("model_info_slots", m.info_slots.to_string()),
            ("model_shared_open_class", m.shared_open_class.to_string()),
            ("model_init_seed", m.init_seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Points every seed-consuming stage at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.bc.seed = seed;
        self.model.init_seed = seed;
    }
}

/// `{:?}` prints the shortest string that parses back to the same f64.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn out_of_range(key: &str, value: &str, accepted: &str) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        value: value.to_string(),
        accepted: accepted.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str, accepted: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| out_of_range(key, value, accepted))
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Written into every run directory before work starts, and again with
/// `finished` set when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub vocab_hash: Option<String>,
    pub code_version: String,
    pub started: u64,
    pub finished: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.to_text(),
            seed,
            dataset_hash: None,
            vocab_hash: None,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            started: unix_now(),
            finished: None,
        }
    }
}
