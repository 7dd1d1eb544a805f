//! Tversky index, loss and analytic gradient.
//!
//! With prediction `a_k` and ground truth `b_k`:
//!
//! ```text
//! T = sum a_k b_k          (soft true positives)
//! F = sum a_k (1 - b_k)    (soft false positives, weighted by alpha)
//! N = sum (1 - a_k) b_k    (soft false negatives, weighted by beta)
//! index = (T + s) / (T + alpha F + beta N + s)
//! loss  = 1 - index
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ensure_same_dims, BinaryMask, ImagePlane, ProbabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_smooth")]
    pub smooth: f64,
}

fn default_smooth() -> f64 {
    1.0
}

impl Default for TverskyParams {
    /// alpha = 0.3, beta = 0.7, smooth = 1.
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.7,
            smooth: 1.0,
        }
    }
}

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64, smooth: f64) -> Result<Self> {
        let p = Self { alpha, beta, smooth };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.smooth].iter().all(|v| v.is_finite());
        if !finite || self.alpha < 0.0 || self.beta < 0.0 || self.smooth < 0.0 {
            return Err(Error::invalid(format!(
                "Tversky parameters must be finite and non-negative: {self:?}"
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::invalid("alpha + beta must be positive"));
        }
        Ok(())
    }
}

/// Soft overlap sums over all pixels, in pixel order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapSums {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl OverlapSums {
    pub fn compute(pred: &ProbabilityMap, gt: &BinaryMask) -> Result<Self> {
        ensure_same_dims(pred.dims(), gt.dims())?;
        let mut s = OverlapSums {
            tp: 0.0,
            fp: 0.0,
            fn_: 0.0,
        };
        for (&a, &b) in pred.probs().iter().zip(gt.bits()) {
            if b {
                s.tp += a;
                s.fn_ += 1.0 - a;
            } else {
                s.fp += a;
            }
        }
        Ok(s)
    }

    fn denominator(&self, p: &TverskyParams) -> f64 {
        self.tp + p.alpha * self.fp + p.beta * self.fn_ + p.smooth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TverskyValue {
    pub value: f64,
    /// Set when the denominator vanished and the value was defined by
    /// convention (empty prediction against empty truth).
    pub degenerate: bool,
}

pub fn tversky_index(pred: &ProbabilityMap, gt: &BinaryMask, params: &TverskyParams) -> Result<TverskyValue> {
    params.validate()?;
    let sums = OverlapSums::compute(pred, gt)?;
    let den = sums.denominator(params);
    if den == 0.0 {
        return Ok(TverskyValue {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(TverskyValue {
        value: (sums.tp + params.smooth) / den,
        degenerate: false,
    })
}

pub fn tversky_loss(pred: &ProbabilityMap, gt: &BinaryMask, params: &TverskyParams) -> Result<TverskyValue> {
    let idx = tversky_index(pred, gt, params)?;
    Ok(TverskyValue {
        value: 1.0 - idx.value,
        degenerate: idx.degenerate,
    })
}

/// Gradient of the loss with respect to each prediction value.
///
/// Differentiating `index = (T + s) / D`:
/// `d index / d a_k = (b_k D - (T + s)(b_k + alpha (1 - b_k) - beta b_k)) / D^2`
/// and the loss gradient is its negation.
pub fn tversky_grad(pred: &ProbabilityMap, gt: &BinaryMask, params: &TverskyParams) -> Result<ImagePlane> {
    params.validate()?;
    let sums = OverlapSums::compute(pred, gt)?;
    let den = sums.denominator(params);
    if den == 0.0 {
        return Err(Error::numerical(
            "Tversky gradient undefined: zero denominator with smooth = 0",
        ));
    }
    let num = sums.tp + params.smooth;
    let den2 = den * den;
    let d_fg = -(den - num * (1.0 - params.beta)) / den2;
    let d_bg = num * params.alpha / den2;
    let grad = gt.bits().iter().map(|&b| if b { d_fg } else { d_bg }).collect();
    ImagePlane::new(pred.width(), pred.height(), grad)
}
