//! The inference loop: coarse mask, predicted error map, correction,
//! re-prompting, repeated until the predicted error count stops falling or
//! the iteration budget runs out.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{binarize, build_refined_prompts_with, correct_mask, PointSelection, PromptKinds, PromptSet};
use crate::mask::{BinaryMask, Image, ProbMask};
use crate::metrics::dsc;
use crate::model::{CoSam, ImageEmbedding};
use crate::rng::Streams;

/// The four forward computations the loop needs. Implemented by [`CoSam`];
/// tests substitute stubs.
pub trait Segmenter: Sync {
    type Embedding;

    fn embed(&self, image: &Image) -> Result<Self::Embedding>;

    /// Prompt-free prediction.
    fn coarse(&self, emb: &Self::Embedding) -> Result<ProbMask>;

    /// Error probabilities for `mask` on this image.
    fn error_map(&self, emb: &Self::Embedding, mask: &BinaryMask) -> Result<ProbMask>;

    fn prompted(&self, emb: &Self::Embedding, prompts: &PromptSet) -> Result<ProbMask>;
}

impl Segmenter for CoSam {
    type Embedding = ImageEmbedding;

    fn embed(&self, image: &Image) -> Result<ImageEmbedding> {
        self.encode_image(image)
    }

    fn coarse(&self, emb: &ImageEmbedding) -> Result<ProbMask> {
        first(self.decode_coarse(emb)?.probs()?)
    }

    fn error_map(&self, emb: &ImageEmbedding, mask: &BinaryMask) -> Result<ProbMask> {
        let dense = self.encode_dense(Some(&mask.to_prob()), emb)?;
        first(self.decode_error(emb, &dense)?.probs()?)
    }

    fn prompted(&self, emb: &ImageEmbedding, prompts: &PromptSet) -> Result<ProbMask> {
        first(self.decode_prompted(emb, prompts)?.probs()?)
    }
}

fn first(mut v: Vec<ProbMask>) -> Result<ProbMask> {
    if v.is_empty() {
        return Err(Error::input("model returned an empty batch"));
    }
    Ok(v.swap_remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub k_points: usize,
    pub t_iters: usize,
    pub threshold: f32,
    pub point_selection: PointSelection,
    pub prompt_kinds: PromptKinds,
    /// Seeds Random-K point selection; unused by Top-K.
    pub seed: u64,
    /// Keep the binarized error map of every accepted iteration.
    pub keep_error_maps: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            k_points: 64,
            t_iters: 4,
            threshold: 0.5,
            point_selection: PointSelection::TopK,
            prompt_kinds: PromptKinds::ALL,
            seed: 0,
            keep_error_maps: false,
        }
    }
}

impl RefineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k_points == 0 {
            return Err(Error::config("k_points must be at least 1"));
        }
        if self.t_iters == 0 {
            return Err(Error::config("t_iters must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// The error count of the next iteration did not fall below the last.
    ErrorCountNondecreasing,
    /// All `t_iters` iterations were accepted.
    BudgetExhausted,
    /// A model or geometry call failed; the trace holds what ran before it.
    Aborted(String),
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::ErrorCountNondecreasing => "error-count-nondecreasing",
            StopReason::BudgetExhausted => "budget-exhausted",
            StopReason::Aborted(_) => "aborted",
        }
    }
}

/// One accepted refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Iteration {
    /// 1-based.
    pub t: usize,
    pub n_w: usize,
    pub error_map: Option<BinaryMask>,
    pub prompts: PromptSet,
    pub refined: ProbMask,
}

/// The iteration that ended the loop without being accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub t: usize,
    pub n_w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementTrace {
    pub coarse: ProbMask,
    pub iterations: Vec<Iteration>,
    pub rejected: Option<Rejected>,
    pub stop_reason: StopReason,
}

impl RefinementTrace {
    /// The last accepted refined mask, or the coarse mask.
    pub fn final_mask(&self) -> &ProbMask {
        self.iterations.last().map_or(&self.coarse, |it| &it.refined)
    }

    /// Error counts of the accepted iterations, in order.
    pub fn n_w(&self) -> Vec<usize> {
        self.iterations.iter().map(|it| it.n_w).collect()
    }

    pub fn summary(&self, id: &str, threshold: f32, label: Option<&BinaryMask>) -> Result<TraceSummary> {
        let score = |m: &ProbMask| label.map(|l| dsc(&binarize(m, threshold), l)).transpose();
        Ok(TraceSummary {
            id: id.to_string(),
            n_w: self.n_w(),
            rejected: self.rejected,
            stop_reason: self.stop_reason.name().to_string(),
            abort: match &self.stop_reason {
                StopReason::Aborted(m) => Some(m.clone()),
                _ => None,
            },
            iterations: self.iterations.len(),
            coarse_dsc: score(&self.coarse)?,
            final_dsc: score(self.final_mask())?,
        })
    }

    /// Writes `coarse.png` and `iter_{t}.png` (plus `error_{t}.png` when
    /// error maps were kept), binarized at `threshold`.
    pub fn save_masks(&self, dir: &Path, threshold: f32) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::data::save_mask_png(&dir.join("coarse.png"), &binarize(&self.coarse, threshold))?;
        for it in &self.iterations {
            crate::data::save_mask_png(&dir.join(format!("iter_{}.png", it.t)), &binarize(&it.refined, threshold))?;
            if let Some(e) = &it.error_map {
                crate::data::save_mask_png(&dir.join(format!("error_{}.png", it.t)), e)?;
            }
        }
        Ok(())
    }
}

/// JSON-friendly digest of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub id: String,
    pub n_w: Vec<usize>,
    pub rejected: Option<Rejected>,
    pub stop_reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<String>,
    pub iterations: usize,
    pub coarse_dsc: Option<f64>,
    pub final_dsc: Option<f64>,
}

/// Runs the self-correcting loop on one image. Fails only if the embedding
/// or the coarse mask cannot be computed; later failures end the trace with
/// [`StopReason::Aborted`].
pub fn refine<S: Segmenter>(seg: &S, image: &Image, opts: &RefineOptions) -> Result<RefinementTrace> {
    opts.validate()?;
    let emb = seg.embed(image)?;
    let coarse = seg.coarse(&emb)?;
    coarse.dims().ensure_same(image.dims(), "coarse mask")?;
    let mut trace = RefinementTrace {
        coarse,
        iterations: Vec::new(),
        rejected: None,
        stop_reason: StopReason::BudgetExhausted,
    };
    let streams = Streams::new(opts.seed);
    let mut best = usize::MAX;
    for t in 1..=opts.t_iters {
        match step(seg, &emb, trace.final_mask(), t, best, opts, &streams) {
            Ok(Step::Accepted(it)) => {
                best = it.n_w;
                trace.iterations.push(it);
            }
            Ok(Step::Rejected(r)) => {
                trace.rejected = Some(r);
                trace.stop_reason = StopReason::ErrorCountNondecreasing;
                break;
            }
            Err(e) => {
                trace.stop_reason = StopReason::Aborted(e.to_string());
                break;
            }
        }
    }
    Ok(trace)
}

enum Step {
    Accepted(Iteration),
    Rejected(Rejected),
}

fn step<S: Segmenter>(
    seg: &S,
    emb: &S::Embedding,
    current: &ProbMask,
    t: usize,
    best: usize,
    opts: &RefineOptions,
    streams: &Streams,
) -> Result<Step> {
    let pred = binarize(current, opts.threshold);
    let soft = seg.error_map(emb, &pred)?;
    let errors = binarize(&soft, opts.threshold);
    let n_w = errors.count_ones();
    if n_w >= best {
        return Ok(Step::Rejected(Rejected { t, n_w }));
    }
    let corrected = correct_mask(&pred, &errors)?;
    let mut rng = streams.stream("refine-points", &[t as u64]);
    let prompts = build_refined_prompts_with(
        &soft,
        &corrected,
        opts.k_points,
        opts.point_selection,
        opts.prompt_kinds,
        &mut rng,
    )?;
    let refined = seg.prompted(emb, &prompts)?;
    refined.dims().ensure_same(current.dims(), "refined mask")?;
    Ok(Step::Accepted(Iteration {
        t,
        n_w,
        error_map: opts.keep_error_maps.then_some(errors),
        prompts,
        refined,
    }))
}

/// [`refine`] on every image, on a pool of `parallelism` threads. Results
/// are in input order and do not depend on the thread count.
pub fn refine_batch<S: Segmenter>(
    seg: &S,
    images: &[Image],
    opts: &RefineOptions,
    parallelism: usize,
) -> Result<Vec<Result<RefinementTrace>>> {
    opts.validate()?;
    if parallelism <= 1 {
        return Ok(images.iter().map(|im| refine(seg, im, opts)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| images.par_iter().map(|im| refine(seg, im, opts)).collect()))
}
