use super::*;
use crate::geometry::{BoundingBox, Point, PromptSet};
use crate::mask::BinaryMask;

fn model() -> CoSam {
    CoSam::new(&ArchConfig::default(), 7).unwrap()
}

fn test_image(dims: Dims, seed: u32) -> Image {
    let data = (0..dims.len())
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 999.0)
        .collect();
    Image::new(dims, data).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    tensor_data(t).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn encoder_shape_and_determinism() {
    let m = model();
    let img = test_image(Dims::new(128, 128), 1);
    let a = m.encode_image(&img).unwrap();
    assert_eq!(a.tensor.dims(), &[1, 16, 16, 64]);
    let b = m.encode_image(&img).unwrap();
    assert_eq!(values(&a.tensor), values(&b.tensor));

    let mut data = img.as_slice().to_vec();
    data[500] = 1.0 - data[500];
    let c = m.encode_image(&Image::new(img.dims(), data).unwrap()).unwrap();
    assert!(max_abs_diff(&values(&a.tensor), &values(&c.tensor)) > 0.0);
}

#[test]
fn indivisible_dims_are_a_config_error() {
    let m = model();
    let err = m.encode_image(&test_image(Dims::new(100, 128), 0)).unwrap_err();
    assert!(matches!(err, Error::Config(ref s) if s.contains("height 100")), "{err}");
    let err = m.encode_image(&test_image(Dims::new(64, 4), 0)).unwrap_err();
    assert!(matches!(err, Error::Config(ref s) if s.contains("width 4")), "{err}");
}

#[test]
fn sparse_token_counts_and_labels() {
    let m = model();
    let d = Dims::new(64, 64);
    let pts = [Point::new(1, 2, 1), Point::new(3, 4, 0), Point::new(63, 63, 1)];
    assert_eq!(m.encode_sparse(&pts, None, d).unwrap().len(), 3);
    let bx = BoundingBox::new(2, 3, 10, 20).unwrap();
    let s = m.encode_sparse(&[], Some(&bx), d).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s.kinds, vec![TokenKind::BoxTopLeft, TokenKind::BoxBottomRight]);
    assert!(m.encode_sparse(&[], None, d).unwrap().is_empty());

    let pos = m.encode_sparse(&[Point::new(5, 5, 1)], None, d).unwrap();
    let neg = m.encode_sparse(&[Point::new(5, 5, 0)], None, d).unwrap();
    let diff = max_abs_diff(&values(pos.tokens.as_ref().unwrap()), &values(neg.tokens.as_ref().unwrap()));
    assert!(diff > 1e-3);
}

#[test]
fn sparse_rejects_out_of_bounds() {
    let m = model();
    let err = m.encode_sparse(&[Point::new(64, 3, 1)], None, Dims::new(64, 64)).unwrap_err();
    assert!(err.to_string().contains("(64, 3)"), "{err}");
    let bx = BoundingBox::new(0, 0, 70, 5).unwrap();
    assert!(m.encode_sparse(&[], Some(&bx), Dims::new(64, 64)).is_err());
}

#[test]
fn dense_null_and_masks() {
    let m = model();
    let d = Dims::new(128, 128);
    let emb = m.encode_image(&test_image(d, 3)).unwrap();
    let null = m.encode_dense(None, &emb).unwrap();
    assert!(null.is_null);
    let v = values(&null.tensor);
    for cell in v.chunks_exact(64) {
        assert_eq!(cell, &v[..64]);
    }
    let zeros = m.encode_dense(Some(&ProbMask::filled(d, 0.0).unwrap()), &emb).unwrap();
    let ones = m.encode_dense(Some(&ProbMask::filled(d, 1.0).unwrap()), &emb).unwrap();
    assert_eq!(zeros.tensor.dims(), &[1, 16, 16, 64]);
    assert!(max_abs_diff(&values(&zeros.tensor), &values(&ones.tensor)) > 1e-3);
    assert!(m.encode_dense(Some(&ProbMask::filled(Dims::new(64, 64), 0.0).unwrap()), &emb).is_err());
}

#[test]
fn decode_mask_shape_range_and_null_equivalence() {
    let m = model();
    let d = Dims::new(64, 96);
    let emb = m.encode_image(&test_image(d, 4)).unwrap();
    let coarse = m.decode_coarse(&emb).unwrap();
    assert_eq!(coarse.tensor.dims(), &[1, 64, 96]);
    let probs = coarse.probs().unwrap();
    assert!(probs[0].as_slice().iter().all(|p| (0.0..=1.0).contains(p)));

    let explicit = m
        .decode_mask(&emb, &SparseEmbedding::empty(), &m.encode_dense(None, &emb).unwrap())
        .unwrap();
    assert_eq!(values(&coarse.tensor), values(&explicit.tensor));
    let via_prompts = m.decode_prompted(&emb, &PromptSet::empty()).unwrap();
    assert_eq!(values(&coarse.tensor), values(&via_prompts.tensor));

    let again = m.decode_coarse(&emb).unwrap();
    assert_eq!(values(&coarse.tensor), values(&again.tensor));
}

#[test]
fn prompts_change_the_mask() {
    let m = model();
    let d = Dims::new(64, 64);
    let emb = m.encode_image(&test_image(d, 5)).unwrap();
    let coarse = values(&m.decode_coarse(&emb).unwrap().tensor);
    let prompts = PromptSet {
        points: Some(vec![Point::new(10, 10, 1), Point::new(40, 50, 0)]),
        bbox: Some(BoundingBox::new(5, 5, 30, 30).unwrap()),
        mask: Some(BinaryMask::from_fn(d, |x, y| x < 30 && y < 30).to_prob()),
    };
    let prompted = values(&m.decode_prompted(&emb, &prompts).unwrap().tensor);
    assert!(max_abs_diff(&coarse, &prompted) > 1e-4);
}

#[test]
fn decode_error_shape_and_mask_sensitivity() {
    let m = model();
    let d = Dims::new(128, 128);
    let emb = m.encode_image(&test_image(d, 6)).unwrap();
    let a = m
        .decode_error(&emb, &m.encode_dense(Some(&ProbMask::filled(d, 0.0).unwrap()), &emb).unwrap())
        .unwrap();
    let b = m
        .decode_error(&emb, &m.encode_dense(Some(&ProbMask::filled(d, 1.0).unwrap()), &emb).unwrap())
        .unwrap();
    assert_eq!(a.tensor.dims(), &[1, 128, 128]);
    assert!(max_abs_diff(&values(&a.tensor), &values(&b.tensor)) > 1e-4);
}

#[test]
fn batched_coarse_matches_single() {
    let m = model();
    let d = Dims::new(32, 32);
    let imgs = [test_image(d, 8), test_image(d, 9)];
    let batch = stack_grids(d, imgs.iter().map(|i| i.as_slice()), m.device()).unwrap();
    let emb = m.encode_images(&batch).unwrap();
    let both = values(&m.decode_coarse(&emb).unwrap().tensor);
    for (i, img) in imgs.iter().enumerate() {
        let one = values(&m.decode_coarse(&m.encode_image(img).unwrap()).unwrap().tensor);
        assert!(max_abs_diff(&one, &both[i * d.len()..(i + 1) * d.len()]) < 1e-5);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model();
    m.set_mode(TrainingMode::FrozenBackbone);
    let path = dir.path().join("m.bin");
    m.save(&path).unwrap();
    let back = CoSam::load(&path).unwrap();
    assert_eq!(m.params().snapshot().unwrap(), back.params().snapshot().unwrap());
    assert_eq!(back.mode(), TrainingMode::FrozenBackbone);
    for (a, b) in m.params().iter().zip(back.params().iter()) {
        assert_eq!((a.trainable, a.component), (b.trainable, b.component));
    }
}

#[test]
fn checkpoint_rejects_hash_mismatch_and_bad_format() {
    let m = model();
    let mut ck = m.to_checkpoint(serde_json::Value::Null, &[]).unwrap();
    ck.header.arch_hash = "0".repeat(64);
    assert!(matches!(CoSam::from_checkpoint(&ck), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(CoSam::load(&path).is_err());
}

#[test]
fn frozen_mode_tags_components() {
    let mut m = model();
    m.set_mode(TrainingMode::FrozenBackbone);
    for p in m.params().iter() {
        let expect = matches!(p.component, Component::MaskDecoder | Component::ErrorDecoder);
        assert_eq!(p.trainable, expect, "{}", p.name);
    }
}

#[test]
fn init_is_seeded() {
    let a = CoSam::new(&ArchConfig::default(), 3).unwrap();
    let b = CoSam::new(&ArchConfig::default(), 3).unwrap();
    let c = CoSam::new(&ArchConfig::default(), 4).unwrap();
    assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
    assert_ne!(a.params().snapshot().unwrap(), c.params().snapshot().unwrap());
}

mod shapes {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn outputs_match_input_dims(h in 4usize..=32, w in 4usize..=32) {
            let (h, w) = (h * 8, w * 8);
            let m = CoSam::new(&ArchConfig::default(), 1).unwrap();
            let d = Dims::new(h, w);
            let emb = m.encode_image(&test_image(d, 2)).unwrap();
            prop_assert_eq!(emb.tensor.dims(), &[1, h / 8, w / 8, 64]);
            let mask = m.decode_coarse(&emb).unwrap();
            prop_assert_eq!(mask.tensor.dims(), &[1, h, w]);
            let err = m.decode_error(&emb, &m.null_dense(&emb).unwrap()).unwrap();
            prop_assert_eq!(err.tensor.dims(), &[1, h, w]);
        }
    }
}

#[test]
fn batched_prompted_matches_single() {
    let m = model();
    let d = Dims::new(32, 32);
    let imgs: Vec<Vec<f32>> = (0..3)
        .map(|k| (0..d.len()).map(|i| ((i * 13 + k * 7) % 97) as f32 / 97.0).collect())
        .collect();
    let emb = m
        .encode_images(&stack_grids(d, imgs.iter().map(|v| v.as_slice()), m.device()).unwrap())
        .unwrap();
    let sets = vec![
        PromptSet {
            points: Some(vec![Point::new(3, 4, 1), Point::new(10, 12, 0)]),
            bbox: None,
            mask: None,
        },
        PromptSet::default(),
        PromptSet {
            points: Some(vec![Point::new(5, 6, 1)]),
            bbox: Some(BoundingBox::new(1, 2, 20, 25).unwrap()),
            mask: Some(ProbMask::filled(d, 0.7).unwrap()),
        },
    ];
    let batched = m.decode_prompted_batch(&emb, &sets).unwrap().to_maps().unwrap();
    for (i, p) in sets.iter().enumerate() {
        let single = m.decode_prompted(&emb.select(i).unwrap(), p).unwrap().to_maps().unwrap();
        for (a, b) in batched[i].as_slice().iter().zip(single[0].as_slice()) {
            assert!((a - b).abs() < 1e-5, "sample {i}: {a} vs {b}");
        }
    }
    assert!(m.decode_prompted_batch(&emb, &sets[..2]).is_err());
}
