mod common;

use common::*;
use cosam_core::geometry::{binarize, PromptSet};
use cosam_core::model::ImageEmbedding;
use cosam_core::refine::*;
use cosam_core::train::{fit, FitOptions, TrainConfig};
use cosam_core::{BinaryMask, CoSam, Image, ProbMask, Result};

/// A real model whose error decoder is replaced by one that never reports
/// an error.
struct NoErrors(CoSam);

impl Segmenter for NoErrors {
    type Embedding = ImageEmbedding;

    fn embed(&self, image: &Image) -> Result<ImageEmbedding> {
        self.0.embed(image)
    }

    fn coarse(&self, emb: &ImageEmbedding) -> Result<ProbMask> {
        self.0.coarse(emb)
    }

    fn error_map(&self, _: &ImageEmbedding, mask: &BinaryMask) -> Result<ProbMask> {
        ProbMask::filled(mask.dims(), 0.0)
    }

    fn prompted(&self, emb: &ImageEmbedding, prompts: &PromptSet) -> Result<ProbMask> {
        self.0.prompted(emb, prompts)
    }
}

fn trained() -> (CoSam, Vec<Image>) {
    let data = tiny_benchmark(2, 12, 32);
    let cfg = TrainConfig {
        k_points: 4,
        batch_size: 4,
        base_lr: 3e-3,
        epochs: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, _) = fit(&data[0], &small_arch(), &cfg, &FitOptions::default()).unwrap();
    let images = data.iter().flat_map(|d| d.samples.iter().map(|s| s.image.clone())).collect();
    (model, images)
}

#[test]
fn a_silent_error_decoder_refines_once_without_correcting() {
    let (model, images) = trained();
    let seg = NoErrors(model);
    let opts = RefineOptions {
        k_points: 4,
        ..RefineOptions::default()
    };
    for img in images.iter().take(5) {
        let trace = refine(&seg, img, &opts).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::ErrorCountNondecreasing);
        let coarse = binarize(&trace.coarse, opts.threshold);
        assert_eq!(trace.iterations[0].prompts.mask, Some(coarse.to_prob()));
    }
}

#[test]
fn accepted_error_counts_fall_and_budgets_are_prefixes() {
    let (model, images) = trained();
    let opts = |t_iters| RefineOptions {
        k_points: 4,
        t_iters,
        ..RefineOptions::default()
    };
    for img in &images {
        let full = refine(&model, img, &opts(6)).unwrap();
        assert!(full.iterations.len() <= 6);
        assert!(full.n_w().windows(2).all(|w| w[1] < w[0]), "{:?}", full.n_w());
        if let Some(r) = full.rejected {
            assert!(r.n_w >= *full.n_w().last().unwrap());
        }
        for t in 1..6 {
            let short = refine(&model, img, &opts(t)).unwrap();
            assert_eq!(short.coarse, full.coarse);
            let n = short.iterations.len();
            assert_eq!(short.iterations[..], full.iterations[..n]);
            assert!(n == t || n == full.iterations.len());
        }
    }
}
