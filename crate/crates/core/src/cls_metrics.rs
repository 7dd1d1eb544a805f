//! Binary classification metrics and exact binomial intervals.

use serde::{Deserialize, Serialize, Serializer};

use crate::beta::beta_quantile;
use crate::error::{Error, Result};
use crate::model::ConfusionCounts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    /// Positive-class probability.
    pub score: f64,
    pub positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, positive: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { score, positive })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsFlag {
    /// FP * FN = 0 with TP * TN > 0.
    DorInfinite,
    /// FP * FN = 0 and TP * TN = 0.
    DorUndefined,
    MccZeroDenominator,
    PrecisionNoPredictions,
    FMeasureZero,
    /// The MCC interval is a binomial interval applied to a rounded
    /// continuous statistic.
    MccCiFromRoundedProportion,
}

/// Writes infinities and NaN as strings, since JSON has no literal for them.
fn serialize_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiOptions {
    pub confidence: f64,
    /// Use `sqrt(confidence)` as the per-interval coverage.
    pub joint_sqrt: bool,
}

impl Default for CiOptions {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            joint_sqrt: false,
        }
    }
}

impl CiOptions {
    pub fn effective_confidence(&self) -> f64 {
        if self.joint_sqrt {
            self.confidence.sqrt()
        } else {
            self.confidence
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f_measure: f64,
    pub mcc: f64,
    pub mcc_ci: (f64, f64),
    pub ci_confidence: f64,
    #[serde(serialize_with = "serialize_extended")]
    pub dor: f64,
    pub flags: Vec<ClsFlag>,
}

/// Harmonic mean of precision and sensitivity.
pub fn f_measure(precision: f64, sensitivity: f64) -> f64 {
    if precision + sensitivity == 0.0 {
        return 0.0;
    }
    2.0 * precision * sensitivity / (precision + sensitivity)
}

/// DOR from rates: `(sens / (1 - sens)) * (spec / (1 - spec))`.
pub fn dor_from_rates(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity / (1.0 - sensitivity)) * (specificity / (1.0 - specificity))
}

/// `(TP TN) / (FP FN)`; infinite or NaN when the denominator vanishes.
pub fn dor(c: &ConfusionCounts) -> (f64, Option<ClsFlag>) {
    let num = c.tp as f64 * c.tn_or_zero() as f64;
    let den = c.fp as f64 * c.fn_ as f64;
    if den == 0.0 {
        if num == 0.0 {
            (f64::NAN, Some(ClsFlag::DorUndefined))
        } else {
            (f64::INFINITY, Some(ClsFlag::DorInfinite))
        }
    } else {
        (num / den, None)
    }
}

pub fn mcc(c: &ConfusionCounts) -> (f64, Option<ClsFlag>) {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn_or_zero() as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        return (0.0, Some(ClsFlag::MccZeroDenominator));
    }
    (((tp * tn - fp * fn_) / den).clamp(-1.0, 1.0), None)
}

/// ROC AUC by trapezoidal integration, treating equal scores as a single
/// threshold step. Accumulated in integers, so it equals the Mann-Whitney
/// statistic with ties counted one half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let n_pos = samples.iter().filter(|s| s.positive).count() as u128;
    let n_neg = samples.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "AUC needs at least one positive and one negative sample",
        ));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    // twice the area, in units of one positive times one negative
    let mut doubled: u128 = 0;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let (mut dp, mut dn) = (0u128, 0u128);
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].positive {
                dp += 1;
            } else {
                dn += 1;
            }
            i += 1;
        }
        doubled += dn * (2 * tp + dp);
        tp += dp;
        fp += dn;
    }
    debug_assert_eq!((tp, fp), (n_pos, n_neg));
    Ok(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn confusion_at(samples: &[ScoredSample], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::new(0, 0, 0, 0);
    let mut tn = 0;
    for s in samples {
        match (s.score >= threshold, s.positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    c.tn = Some(tn);
    c
}

/// Full report with samples called positive when `score >= threshold`.
pub fn classify_report(samples: &[ScoredSample], threshold: f64, ci: CiOptions) -> Result<ClsReport> {
    let auc = auc(samples)?;
    let c = confusion_at(samples, threshold);
    let tn = c.tn_or_zero();
    let mut flags = Vec::new();
    let n = samples.len() as f64;
    let sensitivity = c.tp as f64 / (c.tp + c.fn_) as f64;
    let specificity = tn as f64 / (tn + c.fp) as f64;
    let precision = if c.tp + c.fp == 0 {
        flags.push(ClsFlag::PrecisionNoPredictions);
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    if precision + sensitivity == 0.0 {
        flags.push(ClsFlag::FMeasureZero);
    }
    let (mcc, mflag) = mcc(&c);
    let (dor, dflag) = dor(&c);
    flags.extend(mflag);
    flags.extend(dflag);
    let mcc_ci = proportion_ci(mcc, ValueRange::Signed, samples.len() as u64, ci)?;
    flags.push(ClsFlag::MccCiFromRoundedProportion);
    Ok(ClsReport {
        threshold,
        counts: c,
        accuracy: (c.tp + tn) as f64 / n,
        auc,
        sensitivity,
        specificity,
        precision,
        f_measure: f_measure(precision, sensitivity),
        mcc,
        mcc_ci,
        ci_confidence: ci.effective_confidence(),
        dor,
        flags,
    })
}

/// Exact two-sided binomial interval for `successes` out of `trials`.
pub fn clopper_pearson(successes: u64, trials: u64, confidence: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::invalid("Clopper-Pearson interval needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::invalid(format!("{successes} successes exceed {trials} trials")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} must lie in (0, 1)")));
    }
    let alpha = 1.0 - confidence;
    let (k, n) = (successes as f64, trials as f64);
    let low = if successes == 0 {
        0.0
    } else {
        beta_quantile(k, n - k + 1.0, alpha / 2.0)
    };
    let high = if successes == trials {
        1.0
    } else {
        beta_quantile(k + 1.0, n - k, 1.0 - alpha / 2.0)
    };
    Ok((low, high))
}

/// Declared range of a statistic passed to [`proportion_ci`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`, e.g. accuracy or AP.
    Unit,
    /// `[-1, 1]`, e.g. MCC; mapped affinely onto `[0, 1]`.
    Signed,
}

/// Clopper-Pearson interval for a continuous statistic treated as the
/// proportion `round(value * n) / n`.
pub fn proportion_ci(value: f64, range: ValueRange, n: u64, ci: CiOptions) -> Result<(f64, f64)> {
    let unit = match range {
        ValueRange::Unit => value,
        ValueRange::Signed => (value + 1.0) / 2.0,
    };
    if !(0.0..=1.0).contains(&unit) {
        return Err(Error::invalid(format!(
            "value {value} outside its declared range {range:?}"
        )));
    }
    let k = (unit * n as f64).round() as u64;
    let (lo, hi) = clopper_pearson(k.min(n), n, ci.effective_confidence())?;
    Ok(match range {
        ValueRange::Unit => (lo, hi),
        ValueRange::Signed => (2.0 * lo - 1.0, 2.0 * hi - 1.0),
    })
}
