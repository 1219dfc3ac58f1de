//! Per-pixel grids: images, hard masks, soft masks and logit maps.
//!
//! All grids are row-major with the origin at the top-left pixel. Coordinates
//! follow the image convention `x = column`, `y = row`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    pub(crate) fn ensure_same(&self, other: Dims, what: &str) -> Result<()> {
        if *self != other {
            return Err(Error::input(format!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

macro_rules! grid_common {
    ($ty:ident, $elem:ty) => {
        impl $ty {
            pub fn dims(&self) -> Dims {
                self.dims
            }

            pub fn height(&self) -> usize {
                self.dims.height
            }

            pub fn width(&self) -> usize {
                self.dims.width
            }

            pub fn as_slice(&self) -> &[$elem] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<$elem> {
                self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.data[self.dims.index(x, y)]
            }
        }
    };
}

/// Hard {0,1} mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

grid_common!(BinaryMask, bool);

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn ones(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for y in 0..dims.height {
            for x in 0..dims.width {
                data.push(f(x, y));
            }
        }
        Self { dims, data }
    }

    /// Builds a mask from 0/1 bytes; any other value is rejected.
    pub fn from_u8(dims: Dims, bytes: &[u8]) -> Result<Self> {
        check_len(dims, bytes.len())?;
        let data = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                v => Err(Error::input(format!("binary mask value {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, data })
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let i = self.dims.index(x, y);
        self.data[i] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_prob(&self) -> ProbMask {
        ProbMask {
            dims: self.dims,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Soft mask with every value in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMask {
    dims: Dims,
    data: Vec<f32>,
}

grid_common!(ProbMask, f32);

impl ProbMask {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// Logistic squashing of a logit map.
    pub fn from_logits(logits: &LogitMap) -> Self {
        Self {
            dims: logits.dims,
            data: logits.data.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

/// Raw per-pixel logits (mask or error decoder output).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    dims: Dims,
    data: Vec<f32>,
}

grid_common!(LogitMap, f32);

impl LogitMap {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn probs(&self) -> ProbMask {
        ProbMask::from_logits(self)
    }
}

/// Single-channel image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: Dims,
    data: Vec<f32>,
}

grid_common!(Image, f32);

impl Image {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { dims, data })
    }

    /// Per-image min-max normalization; a constant image maps to all zeros.
    pub fn min_max_normalized(dims: Dims, raw: &[f32]) -> Result<Self> {
        check_len(dims, raw.len())?;
        let (lo, hi) = raw
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let data = if range > 0.0 {
            raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self { dims, data })
    }
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::input(format!("grid dims must be positive, got {dims}")));
    }
    if dims.len() != len {
        return Err(Error::input(format!(
            "grid of {dims} needs {} values, got {len}",
            dims.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_ranges() {
        let d = Dims::new(2, 3);
        assert!(BinaryMask::new(d, vec![false; 5]).is_err());
        assert!(ProbMask::new(d, vec![1.5; 6]).is_err());
        assert!(Image::new(d, vec![-0.1; 6]).is_err());
        assert!(BinaryMask::from_u8(d, &[0, 1, 2, 0, 0, 0]).is_err());
        assert!(BinaryMask::new(Dims::new(0, 3), vec![]).is_err());
    }

    #[test]
    fn min_max_of_constant_image_is_zero() {
        let d = Dims::new(2, 2);
        let img = Image::min_max_normalized(d, &[3.0; 4]).unwrap();
        assert_eq!(img.as_slice(), &[0.0; 4]);
        let img = Image::min_max_normalized(d, &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(img.as_slice(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(1000.0) <= 1.0);
    }

    #[test]
    fn coords_round_trip() {
        let d = Dims::new(3, 5);
        for i in 0..d.len() {
            let (x, y) = d.coords(i);
            assert_eq!(d.index(x, y), i);
        }
    }
}
