//! Training objectives.
//!
//! Two parallel implementations: host-side functions over grids (exact, f64
//! accumulation, used for reporting and verification) and differentiable
//! tensor versions used by the trainer. Both share the same definitions:
//!
//! * dice: `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)` with `ε = 1`, on probabilities
//! * bce: mean logit-stable binary cross-entropy
//! * error loss: mean weighted bce with positive weight `ω`
//! * `ω = ln((n_w + n_r) / max(n_w, 1))`

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LogitMap, ProbMask};
use crate::model::ops::weighted_bce_elementwise;

pub const DICE_SMOOTH: f64 = 1.0;

/// A scalar loss plus its named sub-terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            terms: BTreeMap::from([(name.to_string(), value)]),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeight {
    pub omega: f64,
    pub n_w: usize,
    pub n_r: usize,
}

/// Positive-class weight from error and correct pixel counts.
pub fn balance_weight(n_w: usize, n_r: usize) -> Result<BalanceWeight> {
    if n_w + n_r == 0 {
        return Err(Error::input("balance weight needs at least one pixel"));
    }
    let omega = ((n_w + n_r) as f64 / n_w.max(1) as f64).ln();
    Ok(BalanceWeight { omega, n_w, n_r })
}

/// Balance weight of a binary error map (`n_w` = ones, `n_r` = zeros).
pub fn balance_weight_of(e: &BinaryMask) -> BalanceWeight {
    let n_w = e.count_ones();
    balance_weight(n_w, e.dims().len() - n_w).expect("grids are nonempty")
}

pub fn dice_loss(pred: &ProbMask, label: &BinaryMask) -> Result<LossValue> {
    dice_loss_smoothed(pred, label, DICE_SMOOTH)
}

/// Dice loss with an explicit smoothing constant. With `eps = 0` and two
/// empty masks the ratio is undefined; that case returns 0.
pub fn dice_loss_smoothed(pred: &ProbMask, label: &BinaryMask, eps: f64) -> Result<LossValue> {
    pred.dims().ensure_same(label.dims(), "dice loss")?;
    let (mut inter, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in pred.as_slice().iter().zip(label.as_slice()) {
        let p = f64::from(p);
        sp += p;
        if y {
            inter += p;
            sy += 1.0;
        }
    }
    let denom = sp + sy + eps;
    let value = if denom == 0.0 { 0.0 } else { 1.0 - (2.0 * inter + eps) / denom };
    Ok(LossValue::single("dice", value))
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn bce_loss(logits: &LogitMap, label: &BinaryMask) -> Result<LossValue> {
    logits.dims().ensure_same(label.dims(), "bce loss")?;
    let value = weighted_bce_mean(logits, label, 1.0);
    Ok(LossValue::single("bce", value))
}

fn weighted_bce_mean(logits: &LogitMap, target: &BinaryMask, pos_weight: f64) -> f64 {
    let sum: f64 = logits
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&z, &y)| {
            let z = f64::from(z);
            if y {
                pos_weight * softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum();
    sum / logits.dims().len() as f64
}

pub fn seg_loss(logits: &LogitMap, label: &BinaryMask) -> Result<LossValue> {
    let dice = dice_loss(&logits.probs(), label)?.value;
    let bce = bce_loss(logits, label)?.value;
    Ok(LossValue {
        value: dice + bce,
        terms: BTreeMap::from([("dice".into(), dice), ("bce".into(), bce)]),
    })
}

pub fn error_loss(logits: &LogitMap, e: &BinaryMask, weight: &BalanceWeight) -> Result<LossValue> {
    logits.dims().ensure_same(e.dims(), "error loss")?;
    let value = weighted_bce_mean(logits, e, weight.omega);
    let mut out = LossValue::single("error", value);
    out.terms.insert("omega".into(), weight.omega);
    Ok(out)
}

/// The two separately minimized objectives of one training sample.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    coarse: &LogitMap,
    refined: &LogitMap,
    guided: &LogitMap,
    label: &BinaryMask,
    err: &LogitMap,
    e: &BinaryMask,
    lambda_r: f64,
    lambda_g: f64,
) -> Result<(LossValue, LossValue)> {
    let c = seg_loss(coarse, label)?.value;
    let r = seg_loss(refined, label)?.value;
    let g = seg_loss(guided, label)?.value;
    let mask = LossValue {
        value: c + lambda_r * r + lambda_g * g,
        terms: BTreeMap::from([("coarse".into(), c), ("refined".into(), r), ("guided".into(), g)]),
    };
    let error = error_loss(err, e, &balance_weight_of(e))?;
    Ok((mask, error))
}

/// Differentiable losses over `(B, H, W)` tensors. Every function returns a
/// scalar averaged over the batch.
pub mod tensor {
    use super::*;

    fn check(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.dims() != b.dims() || a.rank() != 3 {
            return Err(Error::input(format!(
                "{what}: expected matching (B, H, W) tensors, got {:?} and {:?}",
                a.dims(),
                b.dims()
            )));
        }
        Ok(())
    }

    /// Mean per-sample dice loss of `sigmoid(logits)`.
    pub fn dice(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
        check(logits, labels, "dice loss")?;
        let b = logits.dim(0)?;
        let p = candle_nn::ops::sigmoid(logits)?.flatten_from(1)?;
        let y = labels.flatten_from(1)?;
        let inter = (&p * &y)?.sum(D::Minus1)?;
        let denom = ((p.sum(D::Minus1)? + y.sum(D::Minus1)?)? + DICE_SMOOTH)?;
        let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
        Ok(((ratio.neg()? + 1.0)?.sum_all()? / b as f64)?)
    }

    /// Mean pixel-wise weighted bce; `pos_weight` is `(B,)`.
    pub fn weighted_bce(logits: &Tensor, targets: &Tensor, pos_weight: &Tensor) -> Result<Tensor> {
        check(logits, targets, "bce loss")?;
        let w = pos_weight
            .reshape((logits.dim(0)?, 1, 1))?
            .broadcast_as(logits.shape())?;
        Ok(weighted_bce_elementwise(logits, targets, &w)?.mean_all()?)
    }

    pub fn bce(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let ones = Tensor::ones(logits.dim(0)?, logits.dtype(), logits.device())?;
        weighted_bce(logits, labels, &ones)
    }

    /// Segmentation loss with its dice and bce parts.
    pub fn seg(logits: &Tensor, labels: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = dice(logits, labels)?;
        let b = bce(logits, labels)?;
        Ok(((&d + &b)?, d, b))
    }

    /// Error-map loss with per-sample balance weights `omega: (B,)`.
    pub fn error(logits: &Tensor, e: &Tensor, omega: &Tensor) -> Result<Tensor> {
        weighted_bce(logits, e, omega)
    }
}
