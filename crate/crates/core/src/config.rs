//! Run configuration: a sectioned `key = value` text format, parsed
//! strictly. Every field can also be set as `section.key=value`, which is
//! how command-line flags are applied on top of a file.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::canet::{Aggregation, ConditionSet};
use crate::diffusion::{DiffusionError, GuidanceMode, GuidanceParams, NoiseSchedule};
use crate::mipnet::PredictorKind;
use crate::model::{LossOptions, ModelOptions};
use crate::nn::{ConfigError as ModelConfigError, ModelConfig};
use crate::toy_world::CorpusConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "RUN_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelConfigError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub patch: usize,
    pub predictor: PredictorKind,
    pub aggregation: Aggregation,
    pub conditions: ConditionSet,
    pub mask_ratio: f64,

    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub guidance_mode: GuidanceMode,
    pub pose_gamma: f64,
    pub ddim_steps: usize,

    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub lr: f64,
    pub ema_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub mask_loss: bool,
    pub masked_only: bool,
    pub stop_grad: bool,
    pub independent_draws: bool,
    pub source_drop: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub identities: usize,
    pub test_identities: usize,
    pub views: usize,
    pub poses: usize,
    pub corpus_seed: u64,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "t".into(),
            patch: 2,
            predictor: PredictorKind::SelfCross,
            aggregation: Aggregation::Mlp,
            conditions: ConditionSet::ALL,
            mask_ratio: 0.3,
            gamma: 2.0,
            alpha: 1.0,
            eta: 0.1,
            guidance_mode: GuidanceMode::Standard,
            pose_gamma: 2.0,
            ddim_steps: 50,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            lr: 1e-4,
            ema_decay: 0.9999,
            steps: 10_000,
            batch: 8,
            seed: 0,
            mask_loss: true,
            masked_only: false,
            stop_grad: false,
            independent_draws: false,
            source_drop: 0.0,
            log_every: 50,
            checkpoint_every: 1000,
            identities: 130,
            test_identities: 10,
            views: 4,
            poses: 5,
            corpus_seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), msg: format!("expected true or false, got {value:?}") }),
    }
}

impl RunConfig {
    /// All keys in canonical order, grouped by section.
    pub const KEYS: &'static [(&'static str, &'static [&'static str])] = &[
        ("model", &["preset", "patch", "predictor", "aggregation", "conditions", "mask_ratio"]),
        ("guidance", &["gamma", "alpha", "eta", "mode", "pose_gamma", "ddim_steps"]),
        ("schedule", &["timesteps", "beta_start", "beta_end"]),
        (
            "train",
            &[
                "lr",
                "ema_decay",
                "steps",
                "batch",
                "seed",
                "mask_loss",
                "masked_only",
                "stop_grad",
                "independent_draws",
                "source_drop",
                "log_every",
                "checkpoint_every",
            ],
        ),
        ("data", &["identities", "test_identities", "views", "poses", "corpus_seed"]),
        ("paths", &["data", "out"]),
    ];

    /// Sets one field from its dotted name, e.g. `train.lr`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "model.preset" => {
                ModelConfig::preset(v)?;
                self.preset = v.to_ascii_lowercase();
            }
            "model.patch" => self.patch = parse(key, v)?,
            "model.predictor" => self.predictor = parse(key, v)?,
            "model.aggregation" => self.aggregation = parse(key, v)?,
            "model.conditions" => self.conditions = parse(key, v)?,
            "model.mask_ratio" => self.mask_ratio = parse(key, v)?,
            "guidance.gamma" => self.gamma = parse(key, v)?,
            "guidance.alpha" => {
                self.alpha = match GuidanceParams::alpha_preset(v) {
                    Some(a) => a,
                    None => parse(key, v)?,
                }
            }
            "guidance.eta" => self.eta = parse(key, v)?,
            "guidance.mode" => self.guidance_mode = parse(key, v)?,
            "guidance.pose_gamma" => self.pose_gamma = parse(key, v)?,
            "guidance.ddim_steps" => self.ddim_steps = parse(key, v)?,
            "schedule.timesteps" => self.timesteps = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.ema_decay" => self.ema_decay = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.mask_loss" => self.mask_loss = parse_bool(key, v)?,
            "train.masked_only" => self.masked_only = parse_bool(key, v)?,
            "train.stop_grad" => self.stop_grad = parse_bool(key, v)?,
            "train.independent_draws" => self.independent_draws = parse_bool(key, v)?,
            "train.source_drop" => self.source_drop = parse(key, v)?,
            "train.log_every" => self.log_every = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data.identities" => self.identities = parse(key, v)?,
            "data.test_identities" => self.test_identities = parse(key, v)?,
            "data.views" => self.views = parse(key, v)?,
            "data.poses" => self.poses = parse(key, v)?,
            "data.corpus_seed" => self.corpus_seed = parse(key, v)?,
            "paths.data" => self.data_dir = v.into(),
            "paths.out" => self.out_dir = v.into(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Canonical value text for a dotted key.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        Ok(match key {
            "model.preset" => self.preset.clone(),
            "model.patch" => self.patch.to_string(),
            "model.predictor" => self.predictor.to_string(),
            "model.aggregation" => self.aggregation.name().into(),
            "model.conditions" => self.conditions.to_string(),
            "model.mask_ratio" => self.mask_ratio.to_string(),
            "guidance.gamma" => self.gamma.to_string(),
            "guidance.alpha" => self.alpha.to_string(),
            "guidance.eta" => self.eta.to_string(),
            "guidance.mode" => self.guidance_mode.to_string(),
            "guidance.pose_gamma" => self.pose_gamma.to_string(),
            "guidance.ddim_steps" => self.ddim_steps.to_string(),
            "schedule.timesteps" => self.timesteps.to_string(),
            "schedule.beta_start" => self.beta_start.to_string(),
            "schedule.beta_end" => self.beta_end.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.ema_decay" => self.ema_decay.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.mask_loss" => self.mask_loss.to_string(),
            "train.masked_only" => self.masked_only.to_string(),
            "train.stop_grad" => self.stop_grad.to_string(),
            "train.independent_draws" => self.independent_draws.to_string(),
            "train.source_drop" => self.source_drop.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "data.identities" => self.identities.to_string(),
            "data.test_identities" => self.test_identities.to_string(),
            "data.views" => self.views.to_string(),
            "data.poses" => self.poses.to_string(),
            "data.corpus_seed" => self.corpus_seed.to_string(),
            "paths.data" => self.data_dir.display().to_string(),
            "paths.out" => self.out_dir.display().to_string(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        })
    }

    /// Parses config text over the defaults. Keys outside a section, unknown
    /// keys, repeated keys and malformed lines are all errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line, msg: format!("unclosed section header {content:?}") })?
                    .trim();
                if !Self::KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::Syntax { line, msg: format!("unknown section [{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected key = value, got {content:?}") })?;
            let sec = section
                .as_deref()
                .ok_or_else(|| ConfigError::Syntax { line, msg: "key before any [section]".into() })?;
            let key = format!("{sec}.{}", k.trim());
            if !seen.insert(key.clone()) {
                return Err(ConfigError::Syntax { line, msg: format!("{key} set twice") });
            }
            self.set(&key, v)?;
        }
        Ok(())
    }

    /// Applies `RUN_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("train.seed", &v).map_err(|_| ConfigError::Value {
                key: SEED_ENV.into(),
                msg: format!("expected an unsigned integer, got {v:?}"),
            }),
            Err(_) => Ok(()),
        }
    }

    /// Canonical text; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in Self::KEYS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for k in *keys {
                let v = self.get(&format!("{section}.{k}")).expect("listed key");
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            identities: self.identities,
            test_identities: self.test_identities,
            views: self.views,
            poses: self.poses,
            seed: self.corpus_seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        cfg.patch = self.patch;
        cfg.timesteps = self.timesteps;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions { conditions: self.conditions, aggregation: self.aggregation, predictor: self.predictor }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?)
    }

    pub fn guidance(&self) -> Result<GuidanceParams, ConfigError> {
        let g = GuidanceParams {
            gamma: self.gamma,
            alpha: self.alpha,
            eta: self.eta,
            mode: self.guidance_mode,
            pose_gamma: self.pose_gamma,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            lr: self.lr,
            ema_decay: self.ema_decay,
            seed: self.seed,
            mask_ratio: self.mask_ratio,
            loss: LossOptions { mask_loss: self.mask_loss, masked_only: self.masked_only, stop_grad: self.stop_grad },
            independent_draws: self.independent_draws,
            eta: self.eta,
            source_drop: self.source_drop,
        }
    }

    /// Architecture-relevant text, used to check that a checkpoint fits.
    pub fn architecture_text(&self) -> String {
        ["model.preset", "model.patch", "model.predictor", "model.aggregation", "model.conditions", "schedule.timesteps"]
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
