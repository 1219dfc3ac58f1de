mod common;

use common::*;
use cosam_core::geometry::*;
use cosam_core::rng::Streams;
use cosam_core::{BinaryMask, Dims, ProbMask};
use proptest::prelude::*;

fn mask_strategy(max_side: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |v| BinaryMask::new(Dims::new(h, w), v).unwrap())
    })
}

fn mask_pair(max_side: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let v = proptest::collection::vec(any::<bool>(), h * w);
        (v.clone(), v).prop_map(move |(a, b)| {
            let d = Dims::new(h, w);
            (BinaryMask::new(d, a).unwrap(), BinaryMask::new(d, b).unwrap())
        })
    })
}

fn prob_strategy(max_side: usize) -> impl Strategy<Value = ProbMask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..6, h * w)
            .prop_map(move |v| ProbMask::new(Dims::new(h, w), v.iter().map(|&q| f32::from(q) / 5.0).collect()).unwrap())
    })
}

fn prob_and_labels(max_side: usize) -> impl Strategy<Value = (ProbMask, BinaryMask)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let d = Dims::new(h, w);
        (proptest::collection::vec(0u8..6, h * w), proptest::collection::vec(any::<bool>(), h * w)).prop_map(move |(p, l)| {
            let e = ProbMask::new(d, p.iter().map(|&q| f32::from(q) / 5.0).collect()).unwrap();
            (e, BinaryMask::new(d, l).unwrap())
        })
    })
}

proptest! {
    #[test]
    fn correction_recovers_label((pred, label) in mask_pair(12)) {
        let e = error_label(&pred, &label).unwrap();
        prop_assert_eq!(correct_mask(&pred, &e).unwrap(), label);
    }

    #[test]
    fn correction_is_an_involution((m, e) in mask_pair(12)) {
        let once = correct_mask(&m, &e).unwrap();
        prop_assert_eq!(correct_mask(&once, &e).unwrap(), m);
    }

    #[test]
    fn topk_dominates_the_rest(e in prob_strategy(10), k_frac in 0.0f64..1.0) {
        let dims = e.dims();
        let k = 1 + ((dims.len() - 1) as f64 * k_frac) as usize;
        let labels = BinaryMask::zeros(dims);
        let pts = topk_error_points(&e, &labels, k).unwrap();
        prop_assert_eq!(pts.len(), k);
        let chosen: Vec<usize> = pts.iter().map(|p| dims.index(p.x, p.y)).collect();
        let min_chosen = chosen.iter().map(|&i| e.as_slice()[i]).fold(f32::INFINITY, f32::min);
        for i in 0..dims.len() {
            if !chosen.contains(&i) {
                prop_assert!(e.as_slice()[i] <= min_chosen);
                // Ties go to the row-major-earlier pixel.
                if e.as_slice()[i] == min_chosen {
                    prop_assert!(chosen.iter().filter(|&&c| e.as_slice()[c] == min_chosen).all(|&c| c < i));
                }
            }
        }
    }

    #[test]
    fn topk_matches_full_sort((e, labels) in prob_and_labels(10), k in 1usize..20) {
        prop_assume!(k <= e.dims().len());
        prop_assert_eq!(topk_error_points(&e, &labels, k).unwrap(), topk_oracle(&e, &labels, k));
    }

    #[test]
    fn bbox_is_tight_around_the_largest_component(m in mask_strategy(14)) {
        let comps = components_oracle(&m);
        match largest_component_bbox(&m) {
            None => prop_assert!(comps.is_empty()),
            Some(b) => {
                let best = comps.iter().map(|c| c.len()).max().unwrap();
                let winner = comps.iter().find(|c| c.len() == best).unwrap();
                prop_assert!(winner.iter().all(|&(x, y)| b.contains(x, y)));
                prop_assert!(winner.iter().any(|&(x, _)| x == b.x0));
                prop_assert!(winner.iter().any(|&(x, _)| x == b.x1));
                prop_assert!(winner.iter().any(|&(_, y)| y == b.y0));
                prop_assert!(winner.iter().any(|&(_, y)| y == b.y1));
            }
        }
    }

    #[test]
    fn components_partition_the_foreground(m in mask_strategy(14)) {
        let comps = connected_components(&m);
        prop_assert_eq!(comps.iter().map(|c| c.size).sum::<usize>(), m.count_ones());
        let oracle = components_oracle(&m);
        prop_assert_eq!(comps.len(), oracle.len());
        for (c, o) in comps.iter().zip(&oracle) {
            prop_assert_eq!(c.size, o.len());
        }
    }

    #[test]
    fn binarize_matches_elementwise(m in prob_strategy(12), t in 0.0f32..1.0) {
        prop_assert_eq!(binarize(&m, t), binarize_oracle(&m, t));
    }

    #[test]
    fn random_ops_are_pure_in_their_seed(m in mask_strategy(10), seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let s = Streams::new(seed);
        let a = perturb(&m, alpha, &mut s.stream("p", &[])).unwrap();
        let b = perturb(&m, alpha, &mut s.stream("p", &[])).unwrap();
        prop_assert_eq!(a, b);
        let k = m.dims().len().min(3);
        let a = random_label_points(&m, k, &mut s.stream("g", &[1])).unwrap();
        let b = random_label_points(&m, k, &mut s.stream("g", &[1])).unwrap();
        prop_assert_eq!(a, b);
        let a = random_error_points(&m, k, &mut s.stream("r", &[2])).unwrap();
        let b = random_error_points(&m, k, &mut s.stream("r", &[2])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn guided_points_carry_label_values(m in mask_strategy(10), k in 1usize..6, seed in any::<u64>()) {
        let p = build_guided_prompts(&m, k, &mut Streams::new(seed).stream("g", &[])).unwrap();
        let pts = p.points.unwrap();
        prop_assert_eq!(pts.len(), 2 * k);
        for q in &pts {
            prop_assert_eq!(q.label == 1, m.as_slice()[m.dims().index(q.x, q.y)]);
        }
        prop_assert_eq!(p.bbox, foreground_bbox(&m));
    }
}

#[test]
fn refined_prompt_subsets_drop_only_their_kinds() {
    let dims = Dims::new(12, 12);
    let mut r = rng(3);
    let e = random_prob(dims, &mut r);
    let base = random_mask(dims, 0.4, &mut r);
    let full = build_refined_prompts(&e, &base, 5).unwrap();
    for kinds in PromptKinds::nonempty_subsets() {
        let p = build_refined_prompts_with(&e, &base, 5, PointSelection::TopK, kinds, &mut r).unwrap();
        assert_eq!(p.points.is_some(), kinds.points);
        assert_eq!(p.bbox.is_some(), kinds.bbox);
        assert_eq!(p.mask.is_some(), kinds.mask);
        if kinds.points {
            assert_eq!(p.points, full.points);
        }
        if kinds.bbox {
            assert_eq!(p.bbox, full.bbox);
        }
    }
}
