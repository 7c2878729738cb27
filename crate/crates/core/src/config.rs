//! Run configuration: one TOML file per run, with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, BatchSpec, ClothingState, GeneratorParams};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::kap::{InitMode, SlowPaceScope, SlowPacedSchedule, Stage1Plan, Stage2Plan};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Parent directory for domains without an explicit `root`.
    pub root: PathBuf,
    /// Training stream, in order.
    pub domains: Vec<DomainConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            domains: Vec::new(),
        }
    }
}

/// One domain: where it lives and, for synthetic data, how to generate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub clothing_state: ClothingState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_identities")]
    pub num_identities: usize,
    #[serde(default = "default_images")]
    pub images_per_identity: usize,
    #[serde(default = "default_cameras")]
    pub num_cameras: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
}

fn default_identities() -> usize {
    8
}
fn default_images() -> usize {
    20
}
fn default_cameras() -> usize {
    3
}
fn default_noise() -> f32 {
    0.05
}

impl DomainConfig {
    /// A generated domain with default size, cameras and noise.
    pub fn synthetic(name: &str, clothing_state: ClothingState, seed: u64) -> Self {
        Self {
            name: name.into(),
            clothing_state,
            root: None,
            seed,
            num_identities: default_identities(),
            images_per_identity: default_images(),
            num_cameras: default_cameras(),
            noise_std: default_noise(),
        }
    }

    pub fn resolved_root(&self, data_root: &Path) -> PathBuf {
        self.root
            .clone()
            .unwrap_or_else(|| data_root.join(&self.name))
    }

    pub fn generator_params(&self, model: &ModelConfig) -> GeneratorParams {
        GeneratorParams {
            name: self.name.clone(),
            seed: self.seed,
            num_identities: self.num_identities,
            images_per_identity: self.images_per_identity,
            clothing_state: self.clothing_state,
            num_cameras: self.num_cameras,
            noise_std: self.noise_std,
            image_height: model.image_height,
            image_width: model.image_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "TEATA")]
    Teata,
    /// Sequential fine-tuning with plain identity and triplet losses.
    #[serde(rename = "SFT")]
    Sft,
    /// One run on the union of all train splits.
    #[serde(rename = "JOINT")]
    Joint,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Teata => "TEATA",
            Method::Sft => "SFT",
            Method::Joint => "JOINT",
        })
    }
}

/// Which prompt tensors the stage-2 tuning hook updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTuningScope {
    #[default]
    Both,
    Specific,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch: BatchSpec,
    pub weights: LossWeights,
    pub stage1: Stage1Plan,
    pub stage2: Stage2Plan,
    pub slow_factor: f64,
    pub slow_pace_scope: SlowPaceScope,
    pub init_mode: InitMode,
    pub prompt_tuning: bool,
    pub prompt_tuning_scope: PromptTuningScope,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub eval_after_each_step: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = SlowPacedSchedule::default();
        Self {
            method: Method::Teata,
            seed: 0,
            stage1_epochs: schedule.stage1_epochs,
            stage2_epochs: schedule.stage2_epochs,
            batch: BatchSpec::default(),
            weights: LossWeights::default(),
            stage1: schedule.stage1,
            stage2: schedule.stage2,
            slow_factor: schedule.slow_factor,
            slow_pace_scope: SlowPaceScope::All,
            init_mode: InitMode::KaT,
            prompt_tuning: false,
            prompt_tuning_scope: PromptTuningScope::Both,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            eval_after_each_step: true,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> SlowPacedSchedule {
        SlowPacedSchedule {
            stage1: self.stage1,
            stage1_epochs: self.stage1_epochs,
            stage2: self.stage2,
            stage2_epochs: self.stage2_epochs,
            slow_factor: self.slow_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Domains never trained on, evaluated after every step.
    pub unseen: Vec<DomainConfig>,
    pub cc_protocol_for_cc_domains: bool,
    pub force_cc_protocol: bool,
    pub exclude_same_camera: bool,
    pub cmc_depth: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self {
            unseen: Vec::new(),
            cc_protocol_for_cc_domains: s.cc_protocol_for_cc_domains,
            force_cc_protocol: s.force_cc_protocol,
            exclude_same_camera: s.exclude_same_camera,
            cmc_depth: s.cmc_depth,
            batch_size: s.batch_size,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            cc_protocol_for_cc_domains: self.cc_protocol_for_cc_domains,
            force_cc_protocol: self.force_cc_protocol,
            exclude_same_camera: self.exclude_same_camera,
            cmc_depth: self.cmc_depth,
            batch_size: self.batch_size,
        }
    }
}

impl RunConfig {
    /// Reduced schedule for CPU runs from randomly initialized encoders:
    /// shorter stages, larger learning rates, smaller batches.
    /// Four generated domains, SC -> CC -> SC -> CC, with the shortened plan.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.data.root = PathBuf::from("data/desk");
        cfg.data.domains = [
            ("d1_sc", ClothingState::SC),
            ("d2_cc", ClothingState::CC),
            ("d3_sc", ClothingState::SC),
            ("d4_cc", ClothingState::CC),
        ]
        .into_iter()
        .zip(101..)
        .map(|((name, state), seed)| DomainConfig::synthetic(name, state, seed))
        .collect();
        cfg.train.stage1_epochs = 30;
        cfg.train.stage2_epochs = 20;
        cfg.train.batch = BatchSpec {
            batch_size: 32,
            instances_per_identity: 4,
        };
        cfg.train.stage1 = Stage1Plan { lr: 5e-3 };
        cfg.train.stage2 = Stage2Plan {
            warmup_start_lr: 1e-4,
            peak_lr: 1e-3,
            warmup_epochs: 3,
            decay_epoch: 14,
            decay_factor: 0.1,
        };
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides on dotted keys.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
            key: "<file>".into(),
            message: e.to_string(),
        })?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                Error::Config {
                    key: e.path().to_string(),
                    message: e.inner().to_string(),
                }
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            key: "<serialize>".into(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        self.model.validate()?;
        let t = &self.train;
        if let Err(e) = t.batch.validate() {
            return bad("train.batch", e.to_string());
        }
        if let Err(e) = t.weights.validate() {
            return bad("train.weights", e.to_string());
        }
        if !(t.slow_factor > 0.0 && t.slow_factor.is_finite()) {
            return bad("train.slow_factor", "must be positive".into());
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad("train.weight_decay", "must be non-negative".into());
        }
        let lrs = [
            ("train.stage1.lr", t.stage1.lr),
            ("train.stage2.peak_lr", t.stage2.peak_lr),
            ("train.stage2.warmup_start_lr", t.stage2.warmup_start_lr),
        ];
        for (key, lr) in lrs {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(
                    key,
                    format!("learning rate must be finite and >= 0, got {lr}"),
                );
            }
        }
        if self.eval.cmc_depth == 0 || self.eval.batch_size == 0 {
            return bad("eval", "cmc_depth and batch_size must be positive".into());
        }
        let mut names: Vec<&str> = Vec::new();
        for (i, d) in self
            .data
            .domains
            .iter()
            .chain(&self.eval.unseen)
            .enumerate()
        {
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return bad(
                    &format!("domain[{i}].name"),
                    format!("invalid name `{}`", d.name),
                );
            }
            if names.contains(&d.name.as_str()) {
                return bad(
                    &format!("domain[{i}].name"),
                    format!("duplicate name `{}`", d.name),
                );
            }
            names.push(&d.name);
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config {
        key: item.into(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    // `a.b[0].c` and `a.b.0.c` address the same array element
    let path = key.replace('[', ".").replace(']', "");
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            message: "empty key segment".into(),
        });
    }
    let fail = |message: String| Error::Config {
        key: key.into(),
        message,
    };
    let mut node = table;
    let mut i = 0;
    while i + 1 < parts.len() {
        let part = parts[i];
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            toml::Value::Array(items) if i + 2 < parts.len() => {
                i += 1;
                let len = items.len();
                parts[i]
                    .parse::<usize>()
                    .ok()
                    .and_then(|k| items.get_mut(k))
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| {
                        fail(format!(
                            "`{part}` has {len} entries, got index `{}`",
                            parts[i]
                        ))
                    })?
            }
            _ => return Err(fail(format!("`{part}` is not a table"))),
        };
        i += 1;
    }
    node.insert(parts[i].to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
