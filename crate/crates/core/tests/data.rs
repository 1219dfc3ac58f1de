mod common;

use std::fs;

use common::*;
use cosam_core::data::*;
use cosam_core::{Dims, Error};

const BINS: usize = 16;

fn histogram(s: &Sample) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    for &v in s.image.as_slice() {
        h[((v * BINS as f32) as usize).min(BINS - 1)] += 1.0;
    }
    let n = s.image.as_slice().len() as f64;
    h.iter().map(|c| c / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn quantile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn domains_differ_in_appearance_but_share_shapes() {
    let sets = generate_benchmark(6, 40, Dims::new(64, 64), 42).unwrap();
    let hists: Vec<Vec<Vec<f64>>> = sets.iter().map(|d| d.samples.iter().map(histogram).collect()).collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            // 1-nearest-neighbour on histograms: fit on even samples, score on odd ones.
            let train = |h: &[Vec<f64>]| h.iter().step_by(2).cloned().collect::<Vec<_>>();
            let (ti, tj) = (train(&hists[i]), train(&hists[j]));
            let nearest = |h: &[f64], t: &[Vec<f64>]| t.iter().map(|x| dist(h, x)).fold(f64::INFINITY, f64::min);
            let mut correct = 0;
            let mut total = 0;
            for (h, own) in hists[i].iter().skip(1).step_by(2).map(|h| (h, true)).chain(hists[j].iter().skip(1).step_by(2).map(|h| (h, false))) {
                let says_i = nearest(h, &ti) < nearest(h, &tj);
                correct += usize::from(says_i == own);
                total += 1;
            }
            let acc = correct as f64 / total as f64;
            assert!(acc >= 0.9, "domains {i} and {j} separate with accuracy {acc}");

            let area = |d: &DomainDataset| -> Vec<f64> {
                d.samples.iter().map(|s| s.label.count_ones() as f64 / s.label.dims().len() as f64).collect()
            };
            let (mut ai, mut aj) = (area(&sets[i]), area(&sets[j]));
            let (lo_i, hi_i) = (quantile(&mut ai, 0.1), quantile(&mut ai, 0.9));
            let (lo_j, hi_j) = (quantile(&mut aj, 0.1), quantile(&mut aj, 0.9));
            assert!(lo_i < hi_j && lo_j < hi_i, "foreground areas of {i} and {j} do not overlap");
        }
    }
}

#[test]
fn generation_is_byte_identical_under_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_benchmark(&generate_benchmark(2, 3, Dims::new(32, 32), 9).unwrap(), a.path()).unwrap();
    save_benchmark(&generate_benchmark(2, 3, Dims::new(32, 32), 9).unwrap(), b.path()).unwrap();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
    let c = generate_benchmark(2, 3, Dims::new(32, 32), 10).unwrap();
    assert_ne!(c[0].samples[0].image, generate_benchmark(2, 3, Dims::new(32, 32), 9).unwrap()[0].samples[0].image);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn saved_benchmarks_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_benchmark(3, 4, 32);
    save_benchmark(&sets, dir.path()).unwrap();
    let loaded = load_benchmark(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in sets.iter().zip(&loaded) {
        assert_eq!(a.manifest, b.manifest);
        for (s, t) in a.samples.iter().zip(&b.samples) {
            assert_eq!(s.id, t.id);
            assert_eq!(s.label, t.label);
            // Images are stored as 8-bit and re-normalized on load.
            let max_diff = s
                .image
                .as_slice()
                .iter()
                .zip(t.image.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 2.0 / 255.0, "{}: {max_diff}", s.id);
        }
    }
}

#[test]
fn folders_without_manifest_load_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_benchmark(2, 3, 32);
    save_benchmark(&sets, dir.path()).unwrap();
    fs::remove_file(dir.path().join("A/manifest.json")).unwrap();
    let d = load_dataset(&dir.path().join("A")).unwrap();
    assert_eq!(d.name(), "A");
    assert_eq!(d.manifest.generator, "external");
    let ids: Vec<&str> = d.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["A_0000", "A_0001", "A_0002"]);
}

#[test]
fn broken_folders_are_data_errors() {
    let fresh = || {
        let dir = tempfile::tempdir().unwrap();
        save_benchmark(&tiny_benchmark(2, 2, 32), dir.path()).unwrap();
        dir
    };
    let is_data = |r: cosam_core::Result<DomainDataset>| matches!(r, Err(Error::Data { .. }));

    let d = fresh();
    fs::remove_file(d.path().join("A/masks/A_0001.png")).unwrap();
    assert!(is_data(load_dataset(&d.path().join("A"))));

    let d = fresh();
    let small = image::GrayImage::new(16, 16);
    small.save(d.path().join("A/masks/A_0000.png")).unwrap();
    assert!(is_data(load_dataset(&d.path().join("A"))));

    let d = fresh();
    let rgb = image::RgbImage::new(32, 32);
    rgb.save(d.path().join("A/images/A_0000.png")).unwrap();
    assert!(is_data(load_dataset(&d.path().join("A"))));

    let d = fresh();
    fs::write(d.path().join("A/manifest.json"), "{ not json").unwrap();
    assert!(is_data(load_dataset(&d.path().join("A"))));

    let d = fresh();
    fs::write(d.path().join("A/images/A_0000.png"), b"not a png").unwrap();
    assert!(is_data(load_dataset(&d.path().join("A"))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_benchmark(empty.path()), Err(Error::Data { .. })));
}
