//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key has a default, so an
//! empty file is valid. [`CliConfig::to_text`] writes the fully resolved
//! settings in the same format.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use entivid_core::eval::EvalConfig;
use entivid_core::training::TrainConfig;
use entivid_core::{ModelConfig, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`; known keys: {}", CliConfig::KEYS.join(", "))]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    /// Synthetic generator settings; `channels` and `num_layers` also size the model.
    pub data: SyntheticSpec,
    /// `channels` and `layers` are overwritten from `data` by [`CliConfig::resolve`].
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Model initialization and training seed.
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        let mut cfg = Self {
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        };
        cfg.resolve();
        cfg
    }
}

fn parse<T>(v: &str) -> Result<T, String>
where
    T: FromStr,
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl CliConfig {
    pub const KEYS: [&'static str; 34] = [
        "num_videos",
        "frames_per_video",
        "grid_side",
        "channels",
        "num_phases",
        "actor_patch_side",
        "noise_sigma",
        "num_layers",
        "data_seed",
        "frontend",
        "entities",
        "d_q",
        "d_v",
        "d_model",
        "blocks",
        "heads",
        "mlp_ratio",
        "pooling",
        "proj_dim",
        "view_len",
        "sigma",
        "temperature",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "steps",
        "batch_size",
        "probe_epochs",
        "probe_lr",
        "ridge_lambda",
        "retrieval_k",
        "clip_len",
        "seed",
    ];

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses and validates `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    text: raw.trim().to_string(),
                })?;
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                None => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                Some(reason) => ConfigError::Value {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                },
            })?;
            seen.push(key.to_string());
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// `Err(None)` for an unknown key, `Err(Some(reason))` for a bad value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), Option<String>> {
        let (d, m, t, e) = (
            &mut self.data,
            &mut self.model,
            &mut self.train,
            &mut self.eval,
        );
        match key {
            "num_videos" => d.num_videos = parse(v)?,
            "frames_per_video" => d.frames_per_video = parse(v)?,
            "grid_side" => d.grid_side = parse(v)?,
            "channels" => d.channels = parse(v)?,
            "num_phases" => d.num_phases = parse(v)?,
            "actor_patch_side" => d.actor_patch_side = parse(v)?,
            "noise_sigma" => d.noise_sigma = parse(v)?,
            "num_layers" => d.num_layers = parse(v)?,
            "data_seed" => d.seed = parse(v)?,
            "frontend" => m.frontend = parse(v)?,
            "entities" => m.entities = parse(v)?,
            "d_q" => m.d_q = parse(v)?,
            "d_v" => m.d_v = parse(v)?,
            "d_model" => m.d_model = parse(v)?,
            "blocks" => m.blocks = parse(v)?,
            "heads" => m.heads = parse(v)?,
            "mlp_ratio" => m.mlp_ratio = parse(v)?,
            "pooling" => m.pooling = parse(v)?,
            "proj_dim" => m.proj_dim = parse(v)?,
            "view_len" => t.view_len = parse(v)?,
            "sigma" => t.scl.sigma = parse(v)?,
            "temperature" => t.scl.temperature = parse(v)?,
            "lr" => t.lr = parse(v)?,
            "beta1" => t.beta1 = parse(v)?,
            "beta2" => t.beta2 = parse(v)?,
            "eps" => t.eps = parse(v)?,
            "steps" => t.steps = parse(v)?,
            "batch_size" => t.batch_size = parse(v)?,
            "probe_epochs" => e.probe.epochs = parse(v)?,
            "probe_lr" => e.probe.lr = parse(v)?,
            "ridge_lambda" => e.ridge_lambda = parse(v)?,
            "retrieval_k" => e.retrieval_k = parse(v)?,
            "clip_len" => e.clip_len = Some(parse::<usize>(v)?).filter(|&n| n > 0),
            "seed" => self.seed = parse(v)?,
            _ => return Err(None),
        }
        Ok(())
    }

    /// Copies the data-dependent model sizes and the run seed into place.
    pub fn resolve(&mut self) {
        self.model.channels = self.data.channels;
        self.model.layers = self.data.num_layers;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: entivid_core::Error| ConfigError::Invalid(e.to_string());
        self.data.validate().map_err(invalid)?;
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        let p = &self.eval.probe;
        if p.epochs == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "probe needs epochs > 0 and lr > 0, got {} and {}",
                p.epochs, p.lr
            )));
        }
        if !(self.eval.ridge_lambda >= 0.0 && self.eval.ridge_lambda.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "ridge_lambda {} must be >= 0",
                self.eval.ridge_lambda
            )));
        }
        if self.eval.retrieval_k == 0 {
            return Err(ConfigError::Invalid("retrieval_k must be positive".into()));
        }
        Ok(())
    }

    /// Every setting as `key = value` lines; parsing the output gives back `self`.
    pub fn to_text(&self) -> String {
        let (d, m, t, e) = (&self.data, &self.model, &self.train, &self.eval);
        let values: Vec<(&str, String)> = vec![
            ("num_videos", d.num_videos.to_string()),
            ("frames_per_video", d.frames_per_video.to_string()),
            ("grid_side", d.grid_side.to_string()),
            ("channels", d.channels.to_string()),
            ("num_phases", d.num_phases.to_string()),
            ("actor_patch_side", d.actor_patch_side.to_string()),
            ("noise_sigma", d.noise_sigma.to_string()),
            ("num_layers", d.num_layers.to_string()),
            ("data_seed", d.seed.to_string()),
            ("frontend", m.frontend.to_string()),
            ("entities", m.entities.to_string()),
            ("d_q", m.d_q.to_string()),
            ("d_v", m.d_v.to_string()),
            ("d_model", m.d_model.to_string()),
            ("blocks", m.blocks.to_string()),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("pooling", m.pooling.to_string()),
            ("proj_dim", m.proj_dim.to_string()),
            ("view_len", t.view_len.to_string()),
            ("sigma", t.scl.sigma.to_string()),
            ("temperature", t.scl.temperature.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("probe_epochs", e.probe.epochs.to_string()),
            ("probe_lr", e.probe.lr.to_string()),
            ("ridge_lambda", e.ridge_lambda.to_string()),
            ("retrieval_k", e.retrieval_k.to_string()),
            // 0 embeds each video in one pass
            ("clip_len", e.clip_len.unwrap_or(0).to_string()),
            ("seed", self.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
