//! Deterministic mask and prompt constructions: binarization, perturbation,
//! error labels and correction, point selection, connected components and
//! bounding boxes.
//!
//! Nothing here is learned or differentiable. Every function is pure; the ones
//! that consume randomness take the generator explicitly.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Dims, ProbMask};

/// A labelled point prompt. `label` is 1 for foreground, 0 for background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
    pub label: u8,
}

impl Point {
    pub fn new(x: usize, y: usize, label: u8) -> Self {
        Self { x, y, label }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Inclusive pixel bounds: `x0 <= x1 < W`, `y0 <= y1 < H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::input(format!(
                "box corners out of order: ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

/// The prompt kinds handed to the mask decoder. Any subset may be present;
/// all-absent is the prompt-free call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptSet {
    pub points: Option<Vec<Point>>,
    pub bbox: Option<BoundingBox>,
    pub mask: Option<ProbMask>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.as_ref().is_none_or(|p| p.is_empty()) && self.bbox.is_none() && self.mask.is_none()
    }

    /// Drops every prompt kind not enabled in `kinds`.
    pub fn restricted_to(mut self, kinds: PromptKinds) -> Self {
        if !kinds.points {
            self.points = None;
        }
        if !kinds.bbox {
            self.bbox = None;
        }
        if !kinds.mask {
            self.mask = None;
        }
        self
    }
}

/// Which prompt kinds the refinement stage may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptKinds {
    pub points: bool,
    pub bbox: bool,
    pub mask: bool,
}

impl Default for PromptKinds {
    fn default() -> Self {
        Self::ALL
    }
}

impl PromptKinds {
    pub const ALL: PromptKinds = PromptKinds {
        points: true,
        bbox: true,
        mask: true,
    };

    /// The seven non-empty subsets, singletons first, then pairs, then all.
    pub fn nonempty_subsets() -> Vec<PromptKinds> {
        let mk = |points, bbox, mask| PromptKinds { points, bbox, mask };
        vec![
            mk(true, false, false),
            mk(false, true, false),
            mk(false, false, true),
            mk(true, true, false),
            mk(true, false, true),
            mk(false, true, true),
            mk(true, true, true),
        ]
    }

    /// `points+box+mask` style name.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.points {
            parts.push("points");
        }
        if self.bbox {
            parts.push("box");
        }
        if self.mask {
            parts.push("mask");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let mut kinds = PromptKinds {
            points: false,
            bbox: false,
            mask: false,
        };
        for part in name.split('+').map(str::trim) {
            match part {
                "points" | "point" => kinds.points = true,
                "box" | "bbox" => kinds.bbox = true,
                "mask" => kinds.mask = true,
                other => {
                    return Err(Error::config(format!("unknown prompt kind '{other}'")));
                }
            }
        }
        Ok(kinds)
    }
}

/// How refinement point prompts are picked from an error map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSelection {
    /// The K highest error probabilities.
    #[default]
    TopK,
    /// K pixels drawn uniformly without replacement.
    RandomK,
}

impl PointSelection {
    pub fn name(&self) -> &'static str {
        match self {
            PointSelection::TopK => "top-k",
            PointSelection::RandomK => "random-k",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "top-k" | "topk" => Ok(PointSelection::TopK),
            "random-k" | "randomk" => Ok(PointSelection::RandomK),
            other => Err(Error::config(format!("unknown point selection '{other}'"))),
        }
    }
}

/// Pixel is 1 iff `value >= threshold`.
pub fn binarize(m: &ProbMask, threshold: f32) -> BinaryMask {
    let data = m.as_slice().iter().map(|&v| v >= threshold).collect();
    BinaryMask::new(m.dims(), data).expect("dims preserved")
}

/// Flips every pixel independently with probability `alpha`.
pub fn perturb<R: Rng + ?Sized>(m: &BinaryMask, alpha: f64, rng: &mut R) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("flip probability {alpha} outside [0, 1]")));
    }
    let data = m
        .as_slice()
        .iter()
        .map(|&b| {
            let flip = rng.random::<f64>() < alpha;
            b ^ flip
        })
        .collect();
    BinaryMask::new(m.dims(), data)
}

/// Pixel-wise XOR: 1 marks an error point.
pub fn error_label(pred: &BinaryMask, label: &BinaryMask) -> Result<BinaryMask> {
    xor(pred, label, "error_label")
}

/// Inverts `pred` wherever `errmap` is set.
pub fn correct_mask(pred: &BinaryMask, errmap: &BinaryMask) -> Result<BinaryMask> {
    xor(pred, errmap, "correct_mask")
}

fn xor(a: &BinaryMask, b: &BinaryMask, what: &str) -> Result<BinaryMask> {
    a.dims().ensure_same(b.dims(), what)?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| p ^ q)
        .collect();
    BinaryMask::new(a.dims(), data)
}

pub fn count_error_points(e: &BinaryMask) -> usize {
    e.count_ones()
}

/// The `k` pixels with the largest error values, ordered by descending value
/// and then row-major position. Each point takes its label from
/// `pred_for_labels`.
pub fn topk_error_points(e: &ProbMask, pred_for_labels: &BinaryMask, k: usize) -> Result<Vec<Point>> {
    let dims = e.dims();
    dims.ensure_same(pred_for_labels.dims(), "topk_error_points")?;
    check_k(k, dims)?;
    let values = e.as_slice();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..dims.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order
        .into_iter()
        .map(|i| labelled_point(dims, i, pred_for_labels))
        .collect())
}

/// `k` pixels drawn uniformly without replacement, in draw order. The
/// Random-K counterpart of [`topk_error_points`].
pub fn random_error_points<R: Rng + ?Sized>(
    pred_for_labels: &BinaryMask,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let dims = pred_for_labels.dims();
    check_k(k, dims)?;
    Ok(sample_indices(rng, dims.len(), k)
        .into_iter()
        .map(|i| labelled_point(dims, i, pred_for_labels))
        .collect())
}

fn check_k(k: usize, dims: Dims) -> Result<()> {
    if k == 0 {
        return Err(Error::input("point count K must be at least 1"));
    }
    if k > dims.len() {
        return Err(Error::input(format!(
            "K = {k} exceeds the {} pixels of a {dims} grid",
            dims.len()
        )));
    }
    Ok(())
}

fn labelled_point(dims: Dims, index: usize, labels: &BinaryMask) -> Point {
    let (x, y) = dims.coords(index);
    Point::new(x, y, u8::from(labels.as_slice()[index]))
}

/// One 8-connected foreground component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    /// Row-major index of the component's first pixel.
    pub first: usize,
    pub size: usize,
    pub bbox: BoundingBox,
}

/// Foreground components under 8-connectivity, in row-major order of their
/// first pixel.
pub fn connected_components(m: &BinaryMask) -> Vec<Region> {
    label_components(m).1
}

/// Per-pixel component labels (0 = background, `i + 1` = `components[i]`)
/// alongside the components themselves.
pub fn label_components(m: &BinaryMask) -> (Vec<u32>, Vec<Region>) {
    let dims = m.dims();
    let (w, h) = (dims.width, dims.height);
    let fg = m.as_slice();
    let mut labels = vec![0u32; dims.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..dims.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let id = out.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let (sx, sy) = dims.coords(start);
        let mut bbox = BoundingBox {
            x0: sx,
            y0: sy,
            x1: sx,
            y1: sy,
        };
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = dims.coords(i);
            bbox.x0 = bbox.x0.min(x);
            bbox.x1 = bbox.x1.max(x);
            bbox.y0 = bbox.y0.min(y);
            bbox.y1 = bbox.y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = dims.index(nx, ny);
                    if fg[j] && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Region {
            first: start,
            size,
            bbox,
        });
    }
    (labels, out)
}

/// Tight box around the largest 8-connected foreground component. Equal sizes
/// go to the component whose first pixel comes first in row-major order.
pub fn largest_component_bbox(m: &BinaryMask) -> Option<BoundingBox> {
    let mut best: Option<Region> = None;
    for c in connected_components(m) {
        // Components arrive in row-major order of `first`, so strict `>` keeps
        // the earliest among equals.
        if best.as_ref().is_none_or(|b| c.size > b.size) {
            best = Some(c);
        }
    }
    best.map(|c| c.bbox)
}

/// Tight box around all foreground pixels.
pub fn foreground_bbox(m: &BinaryMask) -> Option<BoundingBox> {
    let dims = m.dims();
    let mut bbox: Option<BoundingBox> = None;
    for (i, _) in m.as_slice().iter().enumerate().filter(|(_, &v)| v) {
        let (x, y) = dims.coords(i);
        let b = bbox.get_or_insert(BoundingBox {
            x0: x,
            y0: y,
            x1: x,
            y1: y,
        });
        b.x0 = b.x0.min(x);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    bbox
}

/// `k` foreground points (label 1) followed by `k` background points
/// (label 0), drawn uniformly without replacement.
///
/// A class with fewer than `k` pixels contributes all of them and then
/// resamples with replacement up to `k`. When a class is absent entirely, all
/// `2k` points come from the other class.
pub fn random_label_points<R: Rng + ?Sized>(y: &BinaryMask, k: usize, rng: &mut R) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::input("point count K must be at least 1"));
    }
    let dims = y.dims();
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (i, &v) in y.as_slice().iter().enumerate() {
        if v {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    let (n_fg, n_bg) = match (fg.is_empty(), bg.is_empty()) {
        (false, false) => (k, k),
        (true, _) => (0, 2 * k),
        (_, true) => (2 * k, 0),
    };
    let mut out = Vec::with_capacity(2 * k);
    for (pool, n, label) in [(&fg, n_fg, 1u8), (&bg, n_bg, 0u8)] {
        for i in draw(pool, n, rng) {
            let (x, yy) = dims.coords(i);
            out.push(Point::new(x, yy, label));
        }
    }
    Ok(out)
}

fn draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        return sample_indices(rng, pool.len(), n)
            .into_iter()
            .map(|j| pool[j])
            .collect();
    }
    let mut out = pool.to_vec();
    while out.len() < n {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// Prompts derived from a (corrected) prediction and its error map: top-K
/// error points labelled by `base`, the largest-component box of `base`, and
/// `base` itself as the mask prompt.
pub fn build_refined_prompts(e: &ProbMask, base: &BinaryMask, k: usize) -> Result<PromptSet> {
    e.dims().ensure_same(base.dims(), "build_refined_prompts")?;
    Ok(PromptSet {
        points: Some(topk_error_points(e, base, k)?),
        bbox: largest_component_bbox(base),
        mask: Some(base.to_prob()),
    })
}

/// Refinement prompts with an explicit point-selection strategy and prompt
/// subset. `rng` is only consumed by [`PointSelection::RandomK`].
pub fn build_refined_prompts_with<R: Rng + ?Sized>(
    e: &ProbMask,
    base: &BinaryMask,
    k: usize,
    selection: PointSelection,
    kinds: PromptKinds,
    rng: &mut R,
) -> Result<PromptSet> {
    let mut prompts = build_refined_prompts(e, base, k)?;
    if selection == PointSelection::RandomK {
        prompts.points = Some(random_error_points(base, k, rng)?);
    }
    Ok(prompts.restricted_to(kinds))
}

/// Prompts derived from the ground-truth label: `k` random positive and `k`
/// random negative points, the tight box of all foreground, and the label as
/// the mask prompt.
pub fn build_guided_prompts<R: Rng + ?Sized>(y: &BinaryMask, k: usize, rng: &mut R) -> Result<PromptSet> {
    Ok(PromptSet {
        points: Some(random_label_points(y, k, rng)?),
        bbox: foreground_bbox(y),
        mask: Some(y.to_prob()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;
    use rand::Rng;

    fn d(h: usize, w: usize) -> Dims {
        Dims::new(h, w)
    }

    fn random_mask(dims: Dims, p: f64, rng: &mut impl Rng) -> BinaryMask {
        BinaryMask::from_fn(dims, |_, _| rng.random::<f64>() < p)
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        let m = ProbMask::filled(d(3, 3), 0.5).unwrap();
        assert_eq!(binarize(&m, 0.5), BinaryMask::ones(d(3, 3)));
        let m = ProbMask::filled(d(3, 3), 0.7).unwrap();
        assert_eq!(binarize(&m, 0.5), BinaryMask::ones(d(3, 3)));
        let m = ProbMask::filled(d(3, 3), 0.4999).unwrap();
        assert_eq!(binarize(&m, 0.5), BinaryMask::zeros(d(3, 3)));
    }

    #[test]
    fn perturb_extremes() {
        let mut rng = Streams::new(1).stream("t", &[]);
        let m = random_mask(d(20, 20), 0.3, &mut rng);
        assert_eq!(perturb(&m, 0.0, &mut rng).unwrap(), m);
        assert_eq!(perturb(&m, 1.0, &mut rng).unwrap(), m.complement());
        assert!(perturb(&m, 1.2, &mut rng).is_err());
        assert!(perturb(&m, -0.1, &mut rng).is_err());
    }

    #[test]
    fn perturb_is_seeded() {
        let s = Streams::new(3);
        let m = BinaryMask::zeros(d(16, 16));
        let a = perturb(&m, 0.3, &mut s.stream("p", &[0])).unwrap();
        let b = perturb(&m, 0.3, &mut s.stream("p", &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn xor_identities() {
        let mut rng = Streams::new(2).stream("t", &[]);
        let y = random_mask(d(8, 8), 0.5, &mut rng);
        assert_eq!(error_label(&y, &y).unwrap(), BinaryMask::zeros(d(8, 8)));
        assert_eq!(error_label(&y.complement(), &y).unwrap(), BinaryMask::ones(d(8, 8)));
        let p = random_mask(d(8, 8), 0.5, &mut rng);
        assert_eq!(correct_mask(&p, &BinaryMask::zeros(d(8, 8))).unwrap(), p);
        let e = error_label(&p, &y).unwrap();
        assert_eq!(correct_mask(&p, &e).unwrap(), y);
        assert!(error_label(&p, &BinaryMask::zeros(d(8, 9))).is_err());
        assert!(correct_mask(&p, &BinaryMask::zeros(d(9, 8))).is_err());
    }

    #[test]
    fn count_error_points_cases() {
        assert_eq!(count_error_points(&BinaryMask::zeros(d(4, 4))), 0);
        assert_eq!(count_error_points(&BinaryMask::ones(d(4, 4))), 16);
    }

    #[test]
    fn topk_unique_max_and_ties() {
        let dims = d(4, 4);
        let mut v = vec![0.1f32; 16];
        v[dims.index(2, 3)] = 0.9;
        let e = ProbMask::new(dims, v).unwrap();
        let labels = BinaryMask::zeros(dims);
        assert_eq!(topk_error_points(&e, &labels, 1).unwrap(), vec![Point::new(2, 3, 0)]);

        let e = ProbMask::filled(dims, 0.3).unwrap();
        let labels = BinaryMask::from_fn(dims, |x, _| x == 1);
        let pts = topk_error_points(&e, &labels, 3).unwrap();
        assert_eq!(pts, vec![Point::new(0, 0, 0), Point::new(1, 0, 1), Point::new(2, 0, 0)]);
    }

    #[test]
    fn topk_errors() {
        let dims = d(2, 2);
        let e = ProbMask::filled(dims, 0.3).unwrap();
        let labels = BinaryMask::zeros(dims);
        assert!(topk_error_points(&e, &labels, 0).is_err());
        assert!(topk_error_points(&e, &labels, 5).is_err());
        assert_eq!(topk_error_points(&e, &labels, 4).unwrap().len(), 4);
        assert!(topk_error_points(&e, &BinaryMask::zeros(d(2, 3)), 1).is_err());
    }

    #[test]
    fn bbox_of_block() {
        let m = BinaryMask::from_fn(d(10, 10), |x, y| (5..=7).contains(&x) && (2..=4).contains(&y));
        assert_eq!(largest_component_bbox(&m), Some(BoundingBox::new(5, 2, 7, 4).unwrap()));
        assert_eq!(largest_component_bbox(&BinaryMask::zeros(d(5, 5))), None);
        assert_eq!(foreground_bbox(&BinaryMask::zeros(d(5, 5))), None);
    }

    #[test]
    fn bbox_picks_larger_component() {
        // 5-pixel plus at top-left, 9-pixel block lower right.
        let m = BinaryMask::from_fn(d(12, 12), |x, y| {
            let plus = (x == 2 && (1..=3).contains(&y)) || (y == 2 && (1..=3).contains(&x));
            let block = (7..=9).contains(&x) && (7..=9).contains(&y);
            plus || block
        });
        assert_eq!(largest_component_bbox(&m), Some(BoundingBox::new(7, 7, 9, 9).unwrap()));
        assert_eq!(foreground_bbox(&m), Some(BoundingBox::new(1, 1, 9, 9).unwrap()));
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = BinaryMask::from_fn(d(5, 5), |x, y| x == y);
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].size, 5);
    }

    #[test]
    fn equal_components_tie_to_row_major_first() {
        let m = BinaryMask::from_fn(d(6, 6), |x, y| (x == 4 && y == 0) || (x == 0 && y == 3));
        assert_eq!(largest_component_bbox(&m), Some(BoundingBox::new(4, 0, 4, 0).unwrap()));
    }

    #[test]
    fn random_label_points_consistent() {
        let s = Streams::new(9);
        let dims = d(16, 16);
        let y = BinaryMask::from_fn(dims, |x, yy| x < 8 && yy < 8);
        let pts = random_label_points(&y, 10, &mut s.stream("g", &[0])).unwrap();
        assert_eq!(pts.len(), 20);
        assert_eq!(pts.iter().filter(|p| p.label == 1).count(), 10);
        for p in &pts {
            assert_eq!(y.get(p.x, p.y), p.is_positive());
        }
        let again = random_label_points(&y, 10, &mut s.stream("g", &[0])).unwrap();
        assert_eq!(pts, again);
        // without replacement
        let mut uniq = pts.clone();
        uniq.sort_by_key(|p| (p.y, p.x));
        uniq.dedup();
        assert_eq!(uniq.len(), 20);
    }

    #[test]
    fn random_label_points_scarce_class() {
        let dims = d(16, 16);
        let fg = [(3, 4), (9, 1), (15, 15)];
        let y = BinaryMask::from_fn(dims, |x, yy| fg.contains(&(x, yy)));
        let pts = random_label_points(&y, 8, &mut Streams::new(4).stream("g", &[])).unwrap();
        let pos: Vec<_> = pts.iter().filter(|p| p.label == 1).map(|p| (p.x, p.y)).collect();
        assert_eq!(pos.len(), 8);
        for f in fg {
            assert!(pos.contains(&f), "{f:?} missing from {pos:?}");
        }
        assert!(pos.iter().all(|p| fg.contains(p)));
        assert_eq!(pts.iter().filter(|p| p.label == 0).count(), 8);
    }

    #[test]
    fn random_label_points_single_class() {
        let dims = d(8, 8);
        let pts = random_label_points(&BinaryMask::zeros(dims), 5, &mut Streams::new(4).stream("g", &[])).unwrap();
        assert_eq!(pts.len(), 10);
        assert!(pts.iter().all(|p| p.label == 0));
        let pts = random_label_points(&BinaryMask::ones(dims), 5, &mut Streams::new(4).stream("g", &[])).unwrap();
        assert_eq!(pts.len(), 10);
        assert!(pts.iter().all(|p| p.label == 1));
    }

    #[test]
    fn refined_prompts_empty_foreground() {
        let dims = d(8, 8);
        let mut rng = Streams::new(5).stream("e", &[]);
        let e = ProbMask::new(dims, (0..64).map(|_| rng.random::<f32>()).collect()).unwrap();
        let base = BinaryMask::zeros(dims);
        let p = build_refined_prompts(&e, &base, 4).unwrap();
        assert_eq!(p.bbox, None);
        assert_eq!(p.mask, Some(base.to_prob()));
        let pts = p.points.unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.label == 0));
    }

    #[test]
    fn refined_prompts_compose_constituents() {
        let dims = d(16, 16);
        let mut rng = Streams::new(6).stream("e", &[]);
        let e = ProbMask::new(dims, (0..256).map(|_| rng.random::<f32>()).collect()).unwrap();
        let base = random_mask(dims, 0.4, &mut rng);
        let p = build_refined_prompts(&e, &base, 7).unwrap();
        assert_eq!(p.points.unwrap(), topk_error_points(&e, &base, 7).unwrap());
        assert_eq!(p.bbox, largest_component_bbox(&base));
        assert_eq!(p.mask.unwrap(), base.to_prob());
    }

    #[test]
    fn random_k_differs_only_in_points() {
        let dims = d(16, 16);
        let mut rng = Streams::new(6).stream("e", &[]);
        let e = ProbMask::new(dims, (0..256).map(|_| rng.random::<f32>()).collect()).unwrap();
        let base = random_mask(dims, 0.4, &mut rng);
        let s = Streams::new(1);
        let top = build_refined_prompts_with(&e, &base, 6, PointSelection::TopK, PromptKinds::ALL, &mut s.stream("r", &[])).unwrap();
        let rnd = build_refined_prompts_with(&e, &base, 6, PointSelection::RandomK, PromptKinds::ALL, &mut s.stream("r", &[])).unwrap();
        assert_eq!(top.bbox, rnd.bbox);
        assert_eq!(top.mask, rnd.mask);
        assert_ne!(top.points, rnd.points);
        assert_eq!(rnd.points.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn guided_prompts_disc_and_empty() {
        let dims = d(32, 32);
        let y = BinaryMask::from_fn(dims, |x, yy| {
            let (dx, dy) = (x as f64 - 15.5, yy as f64 - 15.5);
            dx * dx + dy * dy <= 64.0
        });
        // coordinate scan for the disc bounds
        let xs: Vec<usize> = (0..32).filter(|&x| (0..32).any(|yy| y.get(x, yy))).collect();
        let ys: Vec<usize> = (0..32).filter(|&yy| (0..32).any(|x| y.get(x, yy))).collect();
        let s = Streams::new(8);
        let p = build_guided_prompts(&y, 4, &mut s.stream("g", &[])).unwrap();
        assert_eq!(
            p.bbox,
            Some(BoundingBox::new(xs[0], ys[0], *xs.last().unwrap(), *ys.last().unwrap()).unwrap())
        );
        assert_eq!(p, build_guided_prompts(&y, 4, &mut s.stream("g", &[])).unwrap());

        let empty = BinaryMask::zeros(dims);
        let p = build_guided_prompts(&empty, 4, &mut s.stream("g", &[])).unwrap();
        assert_eq!(p.bbox, None);
        assert_eq!(p.mask, Some(ProbMask::filled(dims, 0.0).unwrap()));
        let pts = p.points.unwrap();
        assert_eq!(pts.len(), 8);
        assert!(pts.iter().all(|q| q.label == 0));
    }

    #[test]
    fn prompt_kind_names_round_trip() {
        let subsets = PromptKinds::nonempty_subsets();
        assert_eq!(subsets.len(), 7);
        for k in subsets {
            assert_eq!(PromptKinds::parse(&k.name()).unwrap(), k);
        }
        assert!(PromptKinds::parse("points+lasso").is_err());
    }

    proptest! {
        #[test]
        fn correction_is_an_involution(bits in proptest::collection::vec(any::<(bool, bool)>(), 36)) {
            let dims = d(6, 6);
            let m = BinaryMask::new(dims, bits.iter().map(|b| b.0).collect()).unwrap();
            let e = BinaryMask::new(dims, bits.iter().map(|b| b.1).collect()).unwrap();
            let once = correct_mask(&m, &e).unwrap();
            prop_assert_eq!(correct_mask(&once, &e).unwrap(), m);
        }

        #[test]
        fn topk_dominates(values in proptest::collection::vec(0u8..6, 64), k in 1usize..64) {
            // coarse value grid forces plenty of ties
            let dims = d(8, 8);
            let e = ProbMask::new(dims, values.iter().map(|&v| f32::from(v) / 5.0).collect()).unwrap();
            let pts = topk_error_points(&e, &BinaryMask::zeros(dims), k).unwrap();
            let chosen: Vec<usize> = pts.iter().map(|p| dims.index(p.x, p.y)).collect();
            let min_sel = chosen.iter().map(|&i| e.as_slice()[i]).fold(f32::INFINITY, f32::min);
            for i in 0..64 {
                if !chosen.contains(&i) {
                    let v = e.as_slice()[i];
                    prop_assert!(v <= min_sel);
                    // a tied non-selected pixel must come after every tied selected one
                    if v == min_sel {
                        prop_assert!(chosen.iter().filter(|&&j| e.as_slice()[j] == v).all(|&j| j < i));
                    }
                }
            }
        }

        #[test]
        fn bbox_is_tight(bits in proptest::collection::vec(any::<bool>(), 100)) {
            let dims = d(10, 10);
            let m = BinaryMask::new(dims, bits).unwrap();
            let (labels, comps) = label_components(&m);
            if let Some(b) = largest_component_bbox(&m) {
                let (idx, best) = comps.iter().enumerate().find(|(_, c)| c.bbox == b).unwrap();
                prop_assert!(comps.iter().all(|c| c.size <= best.size));
                let id = idx as u32 + 1;
                let mut touched = [false; 4];
                for (i, &l) in labels.iter().enumerate() {
                    let (x, y) = dims.coords(i);
                    if l == id {
                        prop_assert!(b.contains(x, y));
                        touched[0] |= x == b.x0;
                        touched[1] |= x == b.x1;
                        touched[2] |= y == b.y0;
                        touched[3] |= y == b.y1;
                    }
                }
                prop_assert!(touched.iter().all(|&t| t));
            } else {
                prop_assert_eq!(m.count_ones(), 0);
            }
        }
    }
}
