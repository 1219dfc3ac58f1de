//! Synthetic multi-domain benchmark, on-disk datasets and domain splits.
//!
//! Every domain shares the same task (segment one or two smooth blobs) but
//! renders it with its own frozen appearance style. On disk a domain lives at
//! `root/<domain>/images/<id>.png`, `root/<domain>/masks/<id>.png` and
//! `root/<domain>/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Dims, Image};
use crate::rng::{StreamRng, Streams};

pub const GENERATOR_VERSION: &str = "cosam-synth-1";
const MANIFEST: &str = "manifest.json";
const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    FourierBlob,
}

/// Appearance parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: String,
    /// Additive intensity offset, applied before clipping.
    pub bias: f64,
    /// Contrast exponent.
    pub gamma: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Box-blur radius in pixels.
    pub blur: u8,
    /// Background texture frequency in cycles per image.
    pub texture_freq: f64,
    pub shape: ShapeFamily,
}

const BIAS: (f64, f64) = (-0.3, 0.3);
const GAMMA: (f64, f64) = (1.0 / 3.0, 3.0);
const NOISE: (f64, f64) = (0.0, 0.15);
const TEXTURE: (f64, f64) = (0.0, 8.0);

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !within(self.bias, BIAS)
            || !within(self.gamma, GAMMA)
            || !within(self.noise, NOISE)
            || !within(self.texture_freq, TEXTURE)
            || self.blur > 2
        {
            return Err(Error::config(format!("style of domain {} is out of range", self.domain)));
        }
        Ok(())
    }

    /// Draws `n` styles whose parameters come from disjoint sub-ranges: each
    /// continuous range is cut into `n` slices and every parameter hands the
    /// slices out in its own shuffled order.
    pub fn draw(n: usize, streams: &Streams) -> Vec<DomainStyle> {
        let mut rng = streams.stream("style", &[]);
        let perm = |rng: &mut StreamRng| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        };
        // Redraw until every pair of domains sits at least two slices apart
        // in some intensity parameter; adjacent slices are easy to confuse
        // and texture frequency leaves the histogram unchanged.
        let gap = 2.min(n.saturating_sub(1));
        let (pb, pg, pn, pt) = loop {
            let p = (perm(&mut rng), perm(&mut rng), perm(&mut rng), perm(&mut rng));
            let apart = |a: usize, b: usize| {
                [&p.0, &p.1, &p.2].iter().any(|q| q[a].abs_diff(q[b]) >= gap)
            };
            if (0..n).all(|a| (a + 1..n).all(|b| apart(a, b))) {
                break p;
            }
        };
        let pblur = perm(&mut rng);
        let slice = |rng: &mut StreamRng, (lo, hi): (f64, f64), i: usize| {
            let w = (hi - lo) / n as f64;
            // Keep a margin inside each slice so neighbouring domains never touch.
            lo + w * (i as f64 + 0.15 + 0.7 * rng.random::<f64>())
        };
        (0..n)
            .map(|d| DomainStyle {
                domain: domain_name(d),
                bias: slice(&mut rng, BIAS, pb[d]),
                gamma: slice(&mut rng, (GAMMA.0.ln(), GAMMA.1.ln()), pg[d]).exp(),
                noise: slice(&mut rng, NOISE, pn[d]),
                blur: (pblur[d] % 3) as u8,
                texture_freq: slice(&mut rng, TEXTURE, pt[d]),
                shape: if d % 2 == 0 {
                    ShapeFamily::Ellipse
                } else {
                    ShapeFamily::FourierBlob
                },
            })
            .collect()
    }
}

pub fn domain_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("D{i}")
    }
}

/// One image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    /// Optional aggregation key (e.g. the volume a slice came from).
    pub group: Option<String>,
    pub image: Image,
    pub label: BinaryMask,
}

impl Sample {
    pub fn dims(&self) -> Dims {
        self.image.dims()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<DomainStyle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    /// Sample ids in dataset order.
    pub samples: Vec<String>,
    /// Optional sample-id -> group key map.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub groups: std::collections::BTreeMap<String, String>,
}

/// The ordered samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(manifest: Manifest, samples: Vec<Sample>) -> Result<Self> {
        if samples.len() != manifest.size {
            return Err(Error::config(format!(
                "manifest of {} lists {} samples, found {}",
                manifest.domain,
                manifest.size,
                samples.len()
            )));
        }
        let dims = Dims::new(manifest.height, manifest.width);
        for s in &samples {
            if s.image.dims() != dims || s.label.dims() != dims {
                return Err(Error::input(format!("sample {} is not {dims}", s.id)));
            }
        }
        Ok(Self { manifest, samples })
    }

    pub fn name(&self) -> &str {
        &self.manifest.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.manifest.height, self.manifest.width)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn truncated(&self, n: usize) -> DomainDataset {
        let samples: Vec<Sample> = self.samples.iter().take(n).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.samples = samples.iter().map(|s| s.id.clone()).collect();
        manifest.size = samples.len();
        manifest.groups.retain(|k, _| manifest.samples.contains(k));
        DomainDataset { manifest, samples }
    }

    /// Writes the domain under `root/<domain>/`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&self.manifest.domain);
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for s in &self.samples {
            let img: Vec<u8> = s.image.as_slice().iter().map(|&v| (v * 255.0).round() as u8).collect();
            write_png(&dir.join("images").join(format!("{}.png", s.id)), s.dims(), img)?;
            save_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), &s.label)?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}

/// Writes a mask as an 8-bit PNG with foreground 255.
pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.dims(), px)
}

fn write_png(path: &Path, dims: Dims, pixels: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(dims.width as u32, dims.height as u32, pixels)
        .ok_or_else(|| Error::data(path, "pixel buffer does not match dims"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

fn read_gray(path: &Path) -> Result<(Dims, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        image::DynamicImage::ImageLuma16(_) => img.to_luma8(),
        other => {
            return Err(Error::data(path, format!("expected a grayscale image, found {:?}", other.color())));
        }
    };
    let dims = Dims::new(gray.height() as usize, gray.width() as usize);
    Ok((dims, gray.into_raw()))
}

/// Loads one domain directory (`<root>/<domain>`). Images are min-max
/// normalized per image, masks thresholded at 128.
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let manifest_path = dir.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e.to_string()))?)
    } else {
        None
    };
    let ids: Vec<String> = match &manifest {
        Some(m) => m.samples.clone(),
        None => {
            let entries = fs::read_dir(&images_dir).map_err(|e| Error::data(&images_dir, e.to_string()))?;
            let mut ids = Vec::new();
            for entry in entries {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            ids.sort();
            ids
        }
    };
    if ids.is_empty() {
        return Err(Error::data(dir, "no images found"));
    }
    let domain = match &manifest {
        Some(m) => m.domain.clone(),
        None => dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("domain")
            .to_string(),
    };
    let groups = manifest.as_ref().map(|m| m.groups.clone()).unwrap_or_default();
    let samples = ids
        .par_iter()
        .map(|id| {
            let img_path = images_dir.join(format!("{id}.png"));
            let mask_path = masks_dir.join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::data(&mask_path, format!("missing mask for image {id}")));
            }
            let (dims, pixels) = read_gray(&img_path)?;
            let (mdims, mpixels) = read_gray(&mask_path)?;
            if dims != mdims {
                return Err(Error::data(&mask_path, format!("mask is {mdims}, image is {dims}")));
            }
            let raw: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
            let image = Image::min_max_normalized(dims, &raw).map_err(|e| Error::data(&img_path, e.to_string()))?;
            let label = BinaryMask::new(dims, mpixels.iter().map(|&p| p >= 128).collect())?;
            Ok(Sample {
                id: id.clone(),
                domain: domain.clone(),
                group: groups.get(id).cloned(),
                image,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = samples[0].dims();
    if let Some(bad) = samples.iter().find(|s| s.dims() != dims) {
        return Err(Error::data(
            images_dir.join(format!("{}.png", bad.id)),
            format!("image is {}, dataset is {dims}", bad.dims()),
        ));
    }
    let manifest = match manifest {
        Some(m) if m.height == dims.height && m.width == dims.width && m.size == samples.len() => m,
        Some(_) => return Err(Error::data(&manifest_path, "manifest disagrees with the files")),
        None => Manifest {
            generator: "external".into(),
            domain,
            style: None,
            seed: None,
            size: samples.len(),
            height: dims.height,
            width: dims.width,
            samples: ids,
            groups,
        },
    };
    DomainDataset::new(manifest, samples)
}

/// Loads every domain directory under `root`, sorted by name.
pub fn load_benchmark(root: &Path) -> Result<Vec<DomainDataset>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::data(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("images").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no domain directories found"));
    }
    dirs.iter().map(|d| load_dataset(d)).collect()
}

pub fn save_benchmark(datasets: &[DomainDataset], root: &Path) -> Result<()> {
    datasets.iter().try_for_each(|d| d.save(root))
}

/// Source domain plus untouched target domains.
pub fn leave_one_domain_out(datasets: &[DomainDataset], source: usize) -> Result<(DomainDataset, Vec<DomainDataset>)> {
    if source >= datasets.len() {
        return Err(Error::input(format!(
            "source index {source} out of range for {} domains",
            datasets.len()
        )));
    }
    let targets = datasets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != source)
        .map(|(_, d)| d.clone())
        .collect();
    Ok((datasets[source].clone(), targets))
}

/// Renders `per_domain` samples for each of `n_domains` styled domains.
pub fn generate_benchmark(n_domains: usize, per_domain: usize, dims: Dims, master_seed: u64) -> Result<Vec<DomainDataset>> {
    if n_domains < 2 {
        return Err(Error::input("a benchmark needs at least two domains"));
    }
    if dims.height < 16 || dims.width < 16 {
        return Err(Error::input(format!("generated images must be at least 16x16, got {dims}")));
    }
    let streams = Streams::new(master_seed);
    DomainStyle::draw(n_domains, &streams)
        .into_iter()
        .enumerate()
        .map(|(d, style)| generate_domain(&style, d, per_domain, dims, &streams, master_seed))
        .collect()
}

fn generate_domain(
    style: &DomainStyle,
    index: usize,
    n: usize,
    dims: Dims,
    streams: &Streams,
    master_seed: u64,
) -> Result<DomainDataset> {
    style.validate()?;
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream("sample", &[index as u64, i as u64]);
            let (image, label) = render(style, dims, &mut rng);
            Sample {
                id: format!("{}_{i:04}", style.domain),
                domain: style.domain.clone(),
                group: None,
                image,
                label,
            }
        })
        .collect();
    let manifest = Manifest {
        generator: GENERATOR_VERSION.into(),
        domain: style.domain.clone(),
        style: Some(style.clone()),
        seed: Some(master_seed),
        size: n,
        height: dims.height,
        width: dims.width,
        samples: samples.iter().map(|s| s.id.clone()).collect(),
        groups: Default::default(),
    };
    DomainDataset::new(manifest, samples)
}

/// Rasterizes one labelled image in the given style.
pub fn render(style: &DomainStyle, dims: Dims, rng: &mut StreamRng) -> (Image, BinaryMask) {
    let label = loop {
        let m = draw_label(style.shape, dims, rng);
        let frac = m.count_ones() as f64 / dims.len() as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break m;
        }
    };
    let (w, h) = (dims.width as f64, dims.height as f64);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let fg = 0.7 + 0.05 * (rng.random::<f64>() - 0.5);
    let bg = 0.3 + 0.05 * (rng.random::<f64>() - 0.5);
    let normal = Normal::new(0.0, style.noise).expect("noise std is finite");
    let mut px: Vec<f64> = (0..dims.len())
        .map(|i| {
            let (x, y) = dims.coords(i);
            let base = if label.as_slice()[i] { fg } else { bg };
            let u = (x as f64 + 0.5) / w * ca + (y as f64 + 0.5) / h * sa;
            let texture = 0.1 * (std::f64::consts::TAU * style.texture_freq * u + phase).sin();
            base + texture + style.bias + normal.sample(rng)
        })
        .collect();
    px = box_blur(&px, dims, style.blur as usize);
    for v in &mut px {
        *v = v.clamp(0.0, 1.0).powf(style.gamma);
    }
    let clipped: Vec<f32> = px.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let norm = Image::min_max_normalized(dims, &clipped).expect("dims match");
    let quantized = norm
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round() / 255.0)
        .collect();
    (Image::new(dims, quantized).expect("values in range"), label)
}

fn draw_label(family: ShapeFamily, dims: Dims, rng: &mut StreamRng) -> BinaryMask {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let side = w.min(h);
    let blobs = rng.random_range(1..=2);
    let shapes: Vec<Blob> = (0..blobs)
        .map(|_| {
            let r0 = side * rng.random_range(0.12..0.3);
            let cx = rng.random_range(r0..(w - r0).max(r0 + 1.0));
            let cy = rng.random_range(r0..(h - r0).max(r0 + 1.0));
            match family {
                ShapeFamily::Ellipse => Blob::Ellipse {
                    cx,
                    cy,
                    a: r0 * rng.random_range(0.7..1.3),
                    b: r0 * rng.random_range(0.7..1.3),
                    rot: rng.random::<f64>() * std::f64::consts::PI,
                },
                ShapeFamily::FourierBlob => {
                    let mut coeffs = [(0.0, 0.0); 4];
                    for (k, c) in coeffs.iter_mut().enumerate() {
                        *c = (
                            rng.random_range(0.0..0.25 / (k + 1) as f64),
                            rng.random::<f64>() * std::f64::consts::TAU,
                        );
                    }
                    Blob::Fourier { cx, cy, r0, coeffs }
                }
            }
        })
        .collect();
    BinaryMask::from_fn(dims, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        shapes.iter().any(|s| s.contains(px, py))
    })
}

enum Blob {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, rot: f64 },
    Fourier { cx: f64, cy: f64, r0: f64, coeffs: [(f64, f64); 4] },
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Blob::Ellipse { cx, cy, a, b, rot } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (rot.cos(), rot.sin());
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Blob::Fourier { cx, cy, r0, coeffs } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = dy.atan2(dx);
                let r = r0
                    * (1.0
                        + coeffs
                            .iter()
                            .enumerate()
                            .map(|(k, &(a, phi))| a * ((k + 1) as f64 * theta + phi).cos())
                            .sum::<f64>());
                dx.hypot(dy) <= r
            }
        }
    }
}

/// Separable box blur with edge clamping.
fn box_blur(px: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return px.to_vec();
    }
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..dims.height {
            for x in 0..dims.width {
                let mut acc = 0.0;
                for o in -r..=r {
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, dims.width as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, dims.height as isize - 1) as usize)
                    };
                    acc += src[dims.index(sx, sy)];
                }
                out[dims.index(x, y)] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(px, true), false)
}
