//! Experiment configuration: named presets plus TOML overrides.
//!
//! A config file may name a `preset`; its keys are laid over that preset
//! (nested tables merge key by key). Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointSelection, PromptKinds};
use crate::mask::Dims;
use crate::model::{ArchConfig, TrainingMode};
use crate::refine::RefineOptions;
use crate::train::{ErrorTarget, LossToggles, OmegaSource, TrainConfig};

pub const PRESETS: [&str; 4] = ["prostate", "od", "oc", "toy"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// Where the benchmark comes from: generated when `root` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub domains: usize,
    pub per_domain: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Aggregate per group key (e.g. volume) before domain averaging.
    pub group_key: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: 6,
            per_domain: 100,
            seed: 42,
            root: None,
            group_key: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub alpha: f64,
    pub k_points: usize,
    pub t_iters: usize,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub threshold: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub mode: TrainingMode,
    /// `[height, width]`.
    pub dims: [usize; 2],
    pub seed: u64,
    /// `+`-joined subset of `coarse`, `refined`, `error`, `guided`.
    pub losses: String,
    /// `+`-joined subset of `points`, `box`, `mask`.
    pub prompts: String,
    pub point_selection: PointSelection,
    pub omega_source: OmegaSource,
    pub error_target: ErrorTarget,
    pub checkpoint_every: usize,
    /// Threads for inference.
    pub parallelism: usize,
    pub arch: ArchConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::prostate()
    }
}

impl ExperimentConfig {
    fn prostate() -> Self {
        Self {
            preset: Some("prostate".into()),
            alpha: 0.2,
            k_points: 64,
            t_iters: 4,
            lambda_r: 1.0,
            lambda_g: 0.1,
            threshold: 0.5,
            epochs: 100,
            batch_size: 16,
            base_lr: 1e-4,
            poly_power: 0.9,
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
            mode: TrainingMode::Scratch,
            dims: [128, 128],
            seed: 0,
            losses: LossToggles::ALL.name(),
            prompts: PromptKinds::ALL.name(),
            point_selection: PointSelection::TopK,
            omega_source: OmegaSource::Label,
            error_target: ErrorTarget::Coarse,
            checkpoint_every: 0,
            parallelism: 1,
            arch: ArchConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::prostate();
        let cfg = match name {
            "prostate" => base,
            "od" => Self {
                preset: Some("od".into()),
                alpha: 0.1,
                k_points: 8,
                lambda_g: 0.1,
                t_iters: 4,
                epochs: 10,
                batch_size: 8,
                optimizer: Optimizer::AdamW,
                weight_decay: 0.01,
                ..base
            },
            "oc" => Self {
                preset: Some("oc".into()),
                alpha: 0.2,
                k_points: 16,
                lambda_g: 0.25,
                t_iters: 1,
                epochs: 20,
                batch_size: 8,
                optimizer: Optimizer::AdamW,
                weight_decay: 0.01,
                ..base
            },
            // Prostate settings at desk scale: fewer points and epochs.
            "toy" => Self {
                preset: Some("toy".into()),
                k_points: 16,
                epochs: 30,
                ..base
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses `text` over a base preset. The file's own `preset` key wins
    /// over `default_preset`; with neither, the prostate preset is the base.
    pub fn from_toml(text: &str, default_preset: Option<&str>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config is not valid TOML: {}", e.message())))?;
        let name = match user.get("preset") {
            Some(toml::Value::String(s)) => Some(s.as_str()),
            Some(_) => return Err(Error::config("preset must be a string")),
            None => default_preset,
        };
        let base = Self::preset(name.unwrap_or("prostate"))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, default_preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Short content hash, stable across runs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::model::sha256_hex(json.as_bytes())[..16].to_string()
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1])
    }

    pub fn losses(&self) -> Result<LossToggles> {
        LossToggles::parse(&self.losses)
    }

    pub fn prompt_kinds(&self) -> Result<PromptKinds> {
        PromptKinds::parse(&self.prompts)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.refine_options()?.validate()?;
        self.arch.validate()?;
        let s = self.arch.stride();
        for v in self.dims {
            if v == 0 || v % s != 0 {
                return Err(Error::config(format!("dims {:?} must be multiples of the encoder stride {s}", self.dims)));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism must be at least 1"));
        }
        if self.data.root.is_none() && (self.data.domains < 2 || self.data.per_domain == 0) {
            return Err(Error::config("data needs at least two domains with one sample each"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            alpha: self.alpha,
            k_points: self.k_points,
            lambda_r: self.lambda_r,
            lambda_g: self.lambda_g,
            threshold: self.threshold,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            poly_power: self.poly_power,
            weight_decay: match self.optimizer {
                Optimizer::Adam => 0.0,
                Optimizer::AdamW => self.weight_decay,
            },
            mode: self.mode,
            seed: self.seed,
            losses: self.losses()?,
            prompt_kinds: self.prompt_kinds()?,
            point_selection: self.point_selection,
            omega_source: self.omega_source,
            error_target: self.error_target,
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        })
    }

    pub fn refine_options(&self) -> Result<RefineOptions> {
        Ok(RefineOptions {
            k_points: self.k_points,
            t_iters: self.t_iters,
            threshold: self.threshold,
            point_selection: self.point_selection,
            prompt_kinds: self.prompt_kinds()?,
            seed: self.seed,
            keep_error_maps: false,
        })
    }

    /// Applies one `key=value` override, with `value` in TOML syntax
    /// (bare words are read as strings).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut patch = toml::Table::new();
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields at least one part");
        let mut leaf = toml::Table::new();
        leaf.insert(last.to_string(), parsed);
        let mut node = leaf;
        while let Some(p) = parts.pop() {
            let mut t = toml::Table::new();
            t.insert(p.to_string(), toml::Value::Table(node));
            node = t;
        }
        merge(&mut patch, node);
        let mut merged = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, patch);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override {key}={value}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
