//! The four-phase training step and the epoch loop.
//!
//! Per step: a batched prompt-free pass gives the coarse mask; the binarized
//! coarse mask is perturbed and fed to the error decoder; error points and the
//! coarse mask become refinement prompts; label-derived prompts give the
//! guided pass. Mask-side and error-decoder parameters have separate
//! optimizers, and the error path sees detached inputs, so each objective
//! updates only its own parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{
    binarize, build_guided_prompts, build_refined_prompts_with, error_label, perturb, BoundingBox, Point,
    PointSelection, PromptKinds, PromptSet,
};
use crate::losses::{balance_weight, tensor as lt};
use crate::mask::BinaryMask;
use crate::model::{stack_grids, ArchConfig, Checkpoint, CoSam, Component, ParamStore, TrainingMode};
use crate::rng::Streams;

/// Which loss terms take part in optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub coarse: bool,
    pub refined: bool,
    pub error: bool,
    pub guided: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        coarse: true,
        refined: true,
        error: true,
        guided: true,
    };

    pub fn any_mask_term(&self) -> bool {
        self.coarse || self.refined || self.guided
    }

    /// `coarse+refined+error` style name.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (on, n) in [
            (self.coarse, "coarse"),
            (self.refined, "refined"),
            (self.error, "error"),
            (self.guided, "guided"),
        ] {
            if on {
                parts.push(n);
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let mut t = LossToggles {
            coarse: false,
            refined: false,
            error: false,
            guided: false,
        };
        for part in name.split('+').map(str::trim) {
            match part {
                "coarse" => t.coarse = true,
                "refined" => t.refined = true,
                "error" => t.error = true,
                "guided" => t.guided = true,
                other => return Err(Error::config(format!("unknown loss term '{other}'"))),
            }
        }
        Ok(t)
    }
}

/// Where the balance-weight pixel counts come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSource {
    /// The ground-truth error map.
    #[default]
    Label,
    /// The binarized predicted error map.
    Prediction,
}

/// Which mask the error-decoder target is computed against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorTarget {
    /// XOR of the un-perturbed coarse mask and the label.
    #[default]
    Coarse,
    /// XOR of the perturbed coarse mask and the label.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub k_points: usize,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub threshold: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    pub mode: TrainingMode,
    pub seed: u64,
    pub losses: LossToggles,
    pub prompt_kinds: PromptKinds,
    pub point_selection: PointSelection,
    pub omega_source: OmegaSource,
    pub error_target: ErrorTarget,
    /// Save a checkpoint every this many epochs (the final epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k_points: 64,
            lambda_r: 1.0,
            lambda_g: 0.1,
            threshold: 0.5,
            epochs: 100,
            batch_size: 16,
            base_lr: 1e-4,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            mode: TrainingMode::Scratch,
            seed: 0,
            losses: LossToggles::ALL,
            prompt_kinds: PromptKinds::ALL,
            point_selection: PointSelection::TopK,
            omega_source: OmegaSource::Label,
            error_target: ErrorTarget::Coarse,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k_points == 0 {
            return bad("k_points must be at least 1");
        }
        if !(self.lambda_r >= 0.0 && self.lambda_g >= 0.0) {
            return bad("lambda_r and lambda_g must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.poly_power > 0.0) {
            return bad("base_lr and poly_power must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Polynomial decay `base * (1 - t / total)^power`, clamped at zero.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub omega: f64,
    pub n_w: usize,
    pub n_r: usize,
}

/// Prompts a training step built for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample: String,
    pub phase: String,
    pub points: Option<Vec<Point>>,
    pub bbox: Option<BoundingBox>,
    /// Foreground pixel count of the mask prompt, if one was given.
    pub mask_area: Option<usize>,
}

impl PromptRecord {
    fn new(sample: &str, phase: &str, p: &PromptSet) -> Self {
        Self {
            sample: sample.into(),
            phase: phase.into(),
            points: p.points.clone(),
            bbox: p.bbox,
            mask_area: p
                .mask
                .as_ref()
                .map(|m| m.as_slice().iter().filter(|&&v| v >= 0.5).count()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub coarse: f64,
    pub refined: Option<f64>,
    pub guided: Option<f64>,
    pub error: Option<f64>,
    pub samples: Vec<SampleStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<PromptRecord>>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with optional decoupled weight decay and per-parameter step counts.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter accepted by `filter` that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, filter: impl Fn(Component) -> bool) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable && filter(p.component)) {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            // Gradients can still reference the forward graph; the moments must not.
            let g = &g.detach();
            let st = match self.state.get_mut(&p.name) {
                Some(s) => s,
                None => self.state.entry(p.name.clone()).or_insert(Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    t: 0,
                }),
            };
            st.t += 1;
            st.m = ((&st.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            st.v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            let denom = ((&st.v / c2)?.sqrt()? + self.eps)?;
            let update = ((&st.m / c1)? / denom)?;
            let mut theta = p.var.as_tensor().clone();
            if self.weight_decay > 0.0 {
                theta = (&theta * (1.0 - lr * self.weight_decay))?;
            }
            p.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }

    fn export(&self, prefix: &str) -> (BTreeMap<String, u64>, Vec<(String, Tensor)>) {
        let mut steps = BTreeMap::new();
        let mut tensors = Vec::new();
        for (name, s) in &self.state {
            steps.insert(name.clone(), s.t);
            tensors.push((format!("{prefix}.m.{name}"), s.m.clone()));
            tensors.push((format!("{prefix}.v.{name}"), s.v.clone()));
        }
        (steps, tensors)
    }

    fn import(&mut self, prefix: &str, steps: &BTreeMap<String, u64>, ck: &Checkpoint, params: &ParamStore) -> Result<()> {
        self.state.clear();
        for (name, &t) in steps {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            let load = |kind: &str| -> Result<Tensor> {
                let key = format!("{prefix}.{kind}.{name}");
                let (_, data) = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                Ok(Tensor::from_vec(data.to_vec(), p.var.shape(), params.device())?)
            };
            self.state.insert(
                name.clone(),
                Moments {
                    m: load("m")?,
                    v: load("v")?,
                    t,
                },
            );
        }
        Ok(())
    }
}

fn is_error_side(c: Component) -> bool {
    c == Component::ErrorDecoder
}

fn finite(phase: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            phase: phase.into(),
            detail: format!("loss is {v}"),
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub const COARSE_PHASE: &str = "Coarse Mask Phase";
pub const ERROR_PHASE: &str = "Error Map Phase";
pub const REFINE_PHASE: &str = "Refine Phase";
pub const GUIDED_PHASE: &str = "Guided Phase";
pub const OPTIMIZATION_PHASE: &str = "Optimization Phase";

/// Owns a model while it trains.
pub struct Trainer {
    model: CoSam,
    cfg: TrainConfig,
    streams: Streams,
    mask_opt: Adam,
    error_opt: Adam,
    step: usize,
    total_steps: usize,
    record_prompts: bool,
}

impl Trainer {
    pub fn new(mut model: CoSam, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        model.set_mode(cfg.mode);
        Ok(Self {
            model,
            streams: Streams::new(cfg.seed),
            mask_opt: Adam::new(&cfg),
            error_opt: Adam::new(&cfg),
            cfg,
            step: 0,
            total_steps,
            record_prompts: false,
        })
    }

    pub fn model(&self) -> &CoSam {
        &self.model
    }

    pub fn into_model(self) -> CoSam {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Attach the prompts built in each step to its report.
    pub fn record_prompts(&mut self, on: bool) {
        self.record_prompts = on;
    }

    pub fn current_lr(&self) -> f64 {
        poly_lr(self.cfg.base_lr, self.step, self.total_steps, self.cfg.poly_power)
    }

    /// One optimization step on `batch` (all samples of one size).
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepReport> {
        let Some(first) = batch.first() else {
            return Err(Error::input("training batch is empty"));
        };
        let dims = first.dims();
        for s in batch {
            s.image.dims().ensure_same(dims, "training batch")?;
            s.label.dims().ensure_same(dims, "training label")?;
        }
        let cfg = &self.cfg;
        let model = &self.model;
        let dev = model.device().clone();
        let toggles = cfg.losses;
        let step = self.step as u64;
        let b = batch.len();
        let mut prompts_log = self.record_prompts.then(Vec::new);

        let images = stack_grids(dims, batch.iter().map(|s| s.image.as_slice()), &dev)?;
        let label_f: Vec<Vec<f32>> = batch.iter().map(|s| s.label.to_f32()).collect();
        let labels = stack_grids(dims, label_f.iter().map(|v| v.as_slice()), &dev)?.squeeze(3)?;

        // Coarse mask phase.
        let emb = model.encode_images(&images)?;
        let coarse = model.decode_coarse(&emb)?;
        let (coarse_loss, _, _) = lt::seg(&coarse.tensor, &labels)?;
        let coarse_value = finite(COARSE_PHASE, scalar(&coarse_loss)?)?;
        let coarse_bin: Vec<BinaryMask> = coarse
            .probs()?
            .iter()
            .map(|p| binarize(p, cfg.threshold))
            .collect();

        // Error map phase.
        let need_error_forward = toggles.error || toggles.refined;
        let mut error_value = None;
        let mut error_loss = None;
        let mut error_probs = Vec::new();
        let mut stats = Vec::with_capacity(b);
        if need_error_forward {
            let mut perturbed = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            for (i, s) in batch.iter().enumerate() {
                let mut rng = self.streams.stream("perturb", &[step, i as u64]);
                let p = perturb(&coarse_bin[i], cfg.alpha, &mut rng)?;
                let base = match cfg.error_target {
                    ErrorTarget::Coarse => &coarse_bin[i],
                    ErrorTarget::Perturbed => &p,
                };
                targets.push(error_label(base, &s.label)?);
                perturbed.push(p.to_f32());
            }
            let masks = stack_grids(dims, perturbed.iter().map(|v| v.as_slice()), &dev)?;
            let mask_emb = model.encode_dense_masks(&masks)?;
            let err = model.decode_error(&emb, &mask_emb)?;
            error_probs = err.probs()?;
            let mut omegas = Vec::with_capacity(b);
            for (i, e) in targets.iter().enumerate() {
                let n_w = e.count_ones();
                let counted = match cfg.omega_source {
                    OmegaSource::Label => n_w,
                    OmegaSource::Prediction => binarize(&error_probs[i], cfg.threshold).count_ones(),
                };
                let w = balance_weight(counted, dims.len() - counted)?;
                omegas.push(w.omega);
                stats.push(SampleStats {
                    omega: w.omega,
                    n_w,
                    n_r: dims.len() - n_w,
                });
            }
            if toggles.error {
                let target_f: Vec<Vec<f32>> = targets.iter().map(|e| e.to_f32()).collect();
                let e_t = stack_grids(dims, target_f.iter().map(|v| v.as_slice()), &dev)?.squeeze(3)?;
                let omega_t = Tensor::from_vec(omegas.iter().map(|&w| w as f32).collect::<Vec<_>>(), b, &dev)?;
                let loss = lt::error(&err.tensor, &e_t, &omega_t)?;
                error_value = Some(finite(ERROR_PHASE, scalar(&loss)?)?);
                error_loss = Some(loss);
            }
        }

        // Refine phase.
        let mut refined_value = None;
        let mut refined_loss = None;
        if toggles.refined {
            let mut sets = Vec::with_capacity(b);
            for (i, s) in batch.iter().enumerate() {
                let mut rng = self.streams.stream("random-k", &[step, i as u64]);
                let prompts = build_refined_prompts_with(
                    &error_probs[i],
                    &coarse_bin[i],
                    cfg.k_points,
                    cfg.point_selection,
                    cfg.prompt_kinds,
                    &mut rng,
                )?;
                if let Some(log) = prompts_log.as_mut() {
                    log.push(PromptRecord::new(&s.id, REFINE_PHASE, &prompts));
                }
                sets.push(prompts);
            }
            let out = model.decode_prompted_batch(&emb, &sets)?;
            let (loss, _, _) = lt::seg(&out.tensor, &labels)?;
            refined_value = Some(finite(REFINE_PHASE, scalar(&loss)?)?);
            refined_loss = Some(loss);
        }

        // Guided phase.
        let mut guided_value = None;
        let mut guided_loss = None;
        if toggles.guided {
            let mut sets = Vec::with_capacity(b);
            for (i, s) in batch.iter().enumerate() {
                let mut rng = self.streams.stream("guided", &[step, i as u64]);
                let prompts = build_guided_prompts(&s.label, cfg.k_points, &mut rng)?;
                if let Some(log) = prompts_log.as_mut() {
                    log.push(PromptRecord::new(&s.id, GUIDED_PHASE, &prompts));
                }
                sets.push(prompts);
            }
            let out = model.decode_prompted_batch(&emb, &sets)?;
            let (loss, _, _) = lt::seg(&out.tensor, &labels)?;
            guided_value = Some(finite(GUIDED_PHASE, scalar(&loss)?)?);
            guided_loss = Some(loss);
        }

        // Optimization phase.
        let lr = self.current_lr();
        let mut mask_grads = None;
        if toggles.any_mask_term() {
            let mut total: Option<Tensor> = None;
            let mut add = |t: Tensor| -> Result<()> {
                total = Some(match total.take() {
                    Some(acc) => (acc + t)?,
                    None => t,
                });
                Ok(())
            };
            if toggles.coarse {
                add(coarse_loss)?;
            }
            if let Some(l) = refined_loss {
                add((l * cfg.lambda_r)?)?;
            }
            if let Some(l) = guided_loss {
                add((l * cfg.lambda_g)?)?;
            }
            let total = total.expect("at least one mask term");
            finite(OPTIMIZATION_PHASE, scalar(&total)?)?;
            mask_grads = Some(total.backward()?);
        }
        let error_grads = error_loss.map(|l| l.backward()).transpose()?;
        if let Some(g) = mask_grads {
            self.mask_opt.step(model.params(), &g, lr, |c| !is_error_side(c))?;
        }
        if let Some(g) = error_grads {
            self.error_opt.step(model.params(), &g, lr, is_error_side)?;
        }

        let report = StepReport {
            step: self.step,
            epoch,
            lr,
            coarse: coarse_value,
            refined: refined_value,
            guided: guided_value,
            error: error_value,
            samples: stats,
            prompts: prompts_log,
        };
        self.step += 1;
        Ok(report)
    }

    fn checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        let (mask_steps, mut extras) = self.mask_opt.export("opt.mask");
        let (error_steps, error_tensors) = self.error_opt.export("opt.error");
        extras.extend(error_tensors);
        let state = serde_json::json!({
            "epoch": epoch,
            "step": self.step,
            "total_steps": self.total_steps,
            "train_config": self.cfg,
            "optimizer": { "mask": mask_steps, "error": error_steps },
        });
        self.model.to_checkpoint(state, &extras)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<usize> {
        let state = &ck.header.state;
        let field = |k: &str| {
            state
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint state lacks '{k}'")))
        };
        let epoch = field("epoch")? as usize;
        self.step = field("step")? as usize;
        let steps = |k: &str| -> Result<BTreeMap<String, u64>> {
            Ok(serde_json::from_value(state["optimizer"][k].clone())?)
        };
        self.mask_opt.import("opt.mask", &steps("mask")?, ck, self.model.params())?;
        self.error_opt.import("opt.error", &steps("error")?, ck, self.model.params())?;
        Ok(epoch)
    }
}

/// Where a run keeps its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Run directory; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    /// Continue from the run directory's `latest` checkpoint if there is one.
    pub resume: bool,
    /// Starting weights (required for the frozen-backbone mode).
    pub init: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (simulates an interruption).
    pub stop_after: Option<usize>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST: &str = "latest";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}.bin")
}

/// Path of the checkpoint the `latest` marker points at.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let marker = run_dir.join(LATEST);
    if !marker.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&marker)?;
    Ok(Some(run_dir.join(name.trim())))
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Trains a fresh (or initialized, or resumed) model on one dataset.
pub fn fit(dataset: &DomainDataset, arch: &ArchConfig, cfg: &TrainConfig, opts: &FitOptions) -> Result<(CoSam, Vec<StepReport>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let model = match &opts.init {
        Some(path) => {
            let m = CoSam::load(path)?;
            if m.arch() != arch {
                return Err(Error::Checkpoint(format!(
                    "initial checkpoint {} has a different architecture (hash {})",
                    path.display(),
                    m.arch().hash()
                )));
            }
            m
        }
        None if cfg.mode == TrainingMode::FrozenBackbone => {
            return Err(Error::config("frozen-backbone training needs an initial checkpoint"));
        }
        None => CoSam::new(arch, Streams::new(cfg.seed).derive_seed("init", &[]))?,
    };
    let per_epoch = steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(model, cfg.clone(), total)?;
    let mut log = Vec::new();
    let mut start_epoch = 0;

    if let (Some(dir), true) = (&opts.run_dir, opts.resume) {
        if let Some(path) = latest_checkpoint(dir)? {
            let ck = Checkpoint::load(&path)?;
            if ck.header.arch_hash != arch.hash() {
                return Err(Error::Checkpoint(format!(
                    "refusing to resume: {} was written for architecture {}, current is {}",
                    path.display(),
                    ck.header.arch_hash,
                    arch.hash()
                )));
            }
            trainer.model.copy_params_from(&CoSam::from_checkpoint(&ck)?)?;
            start_epoch = trainer.restore(&ck)?;
            log = read_log(&dir.join(LOG_FILE))?
                .into_iter()
                .filter(|r| r.step < trainer.step)
                .collect();
        }
    }
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir)?;
        write_log(&dir.join(LOG_FILE), &log)?;
    }

    let end_epoch = opts.stop_after.map_or(cfg.epochs, |n| n.min(cfg.epochs));
    let streams = Streams::new(cfg.seed);
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut streams.stream("shuffle", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let report = trainer.train_step(&batch, epoch)?;
            if let Some(dir) = &opts.run_dir {
                append_log(&dir.join(LOG_FILE), &report)?;
            }
            log.push(report);
        }
        let done = epoch + 1;
        let due = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.run_dir {
            if due || done == cfg.epochs || done == end_epoch {
                let name = checkpoint_name(done);
                trainer.checkpoint(done)?.save(&dir.join(&name))?;
                fs::write(dir.join(LATEST), format!("{name}\n"))?;
            }
        }
    }
    if cfg.epochs == 0 {
        if let Some(dir) = &opts.run_dir {
            let name = checkpoint_name(0);
            trainer.checkpoint(0)?.save(&dir.join(&name))?;
            fs::write(dir.join(LATEST), format!("{name}\n"))?;
        }
    }
    Ok((trainer.into_model(), log))
}

fn write_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn append_log(path: &Path, r: &StepReport) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(r)?)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
