//! Brute-force reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use cosam_core::data::{generate_benchmark, DomainDataset};
use cosam_core::geometry::{BoundingBox, Point};
use cosam_core::{ArchConfig, BinaryMask, Dims, ProbMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(dims: Dims, p: f64, rng: &mut impl Rng) -> BinaryMask {
    BinaryMask::from_fn(dims, |_, _| rng.random::<f64>() < p)
}

/// Probabilities drawn from a small value set so that ties are common.
pub fn random_prob(dims: Dims, rng: &mut impl Rng) -> ProbMask {
    let data = (0..dims.len()).map(|_| rng.random_range(0..8) as f32 / 7.0).collect();
    ProbMask::new(dims, data).unwrap()
}

pub fn topk_oracle(e: &ProbMask, labels: &BinaryMask, k: usize) -> Vec<Point> {
    let v = e.as_slice();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let w = e.dims().width;
    idx.into_iter()
        .map(|i| Point::new(i % w, i / w, u8::from(labels.as_slice()[i])))
        .collect()
}

fn flood(m: &BinaryMask, seen: &mut [bool], x: usize, y: usize, acc: &mut Vec<(usize, usize)>) {
    let (w, h) = (m.dims().width, m.dims().height);
    let i = y * w + x;
    if seen[i] || !m.as_slice()[i] {
        return;
    }
    seen[i] = true;
    acc.push((x, y));
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                flood(m, seen, nx as usize, ny as usize, acc);
            }
        }
    }
}

/// 8-connected components by recursive flood fill, in row-major order of
/// their first pixel.
pub fn components_oracle(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (m.dims().width, m.dims().height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut acc = Vec::new();
            flood(m, &mut seen, x, y, &mut acc);
            if !acc.is_empty() {
                out.push(acc);
            }
        }
    }
    out
}

pub fn largest_bbox_oracle(m: &BinaryMask) -> Option<BoundingBox> {
    let comps = components_oracle(m);
    let mut best: Option<&Vec<(usize, usize)>> = None;
    for c in &comps {
        if best.is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best.map(|c| {
        let xs = c.iter().map(|p| p.0);
        let ys = c.iter().map(|p| p.1);
        BoundingBox::new(xs.clone().min().unwrap(), ys.clone().min().unwrap(), xs.max().unwrap(), ys.max().unwrap()).unwrap()
    })
}

pub fn xor_oracle(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    let w = a.dims().width;
    BinaryMask::from_fn(a.dims(), |x, y| a.as_slice()[y * w + x] != b.as_slice()[y * w + x])
}

pub fn binarize_oracle(m: &ProbMask, t: f32) -> BinaryMask {
    let w = m.dims().width;
    BinaryMask::from_fn(m.dims(), |x, y| !(m.as_slice()[y * w + x] < t))
}

/// A narrow network for fast tests.
pub fn small_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 16,
        encoder_widths: vec![8, 16],
        decoder_depth: 1,
        heads: 2,
        attn_downsample: 1,
        mlp_dim: 32,
        error_widths: vec![8, 8],
    }
}

pub fn tiny_benchmark(domains: usize, per_domain: usize, side: usize) -> Vec<DomainDataset> {
    generate_benchmark(domains, per_domain, Dims::new(side, side), 7).unwrap()
}
