//! STAPLE fusion of several binary segmentations.
//!
//! Each rater `j` is modelled by a sensitivity `p_j` and specificity `q_j`.
//! The E-step computes the posterior probability `W_i` that pixel `i` is
//! truly foreground; the M-step re-estimates `p_j`, `q_j` from `W`. EM
//! never decreases the observed-data log-likelihood
//! `sum_i ln(a_i + b_i)`, and the per-iteration values are kept in
//! [`StapleResult::log_likelihood`].
//!
//! This is the classical non-spatial formulation: the prior on the hidden
//! labels is a constant or a fixed per-pixel map, with no neighbourhood
//! coupling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::Connectivity;
use crate::error::{Error, Result};
use crate::model::{ensure_same_dims, mask_to_boxes, BinaryMask, BoundingBox, ProbabilityMap};
use crate::parallel::chunked_sum;

/// Bounds applied to every estimated sensitivity/specificity.
pub const PARAM_CLAMP: f64 = 1e-6;
pub const DEFAULT_INIT: f64 = 0.99999;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterPerformance {
    pub sensitivity: f64,
    pub specificity: f64,
}

impl RaterPerformance {
    pub fn new(sensitivity: f64, specificity: f64) -> Result<Self> {
        for v in [sensitivity, specificity] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("rater performance {v} must lie in (0, 1]")));
            }
        }
        Ok(Self {
            sensitivity,
            specificity,
        })
    }
}

/// Prior probability that a pixel is foreground.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Mean foreground fraction over all raters.
    Auto,
    Scalar(f64),
    Map(ProbabilityMap),
}

#[derive(Debug, Clone)]
pub struct StapleProblem {
    raters: Vec<BinaryMask>,
    pub prior: Prior,
    pub tol: f64,
    pub max_iter: usize,
    pub init: RaterPerformance,
}

impl StapleProblem {
    pub fn new(raters: Vec<BinaryMask>) -> Result<Self> {
        let first = raters
            .first()
            .ok_or_else(|| Error::invalid("STAPLE needs at least one rater"))?;
        for r in &raters[1..] {
            ensure_same_dims(first.dims(), r.dims())?;
        }
        Ok(Self {
            raters,
            prior: Prior::Auto,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            init: RaterPerformance {
                sensitivity: DEFAULT_INIT,
                specificity: DEFAULT_INIT,
            },
        })
    }

    pub fn with_prior(mut self, prior: Prior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_init(mut self, init: RaterPerformance) -> Self {
        self.init = init;
        self
    }

    pub fn raters(&self) -> &[BinaryMask] {
        &self.raters
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raters[0].dims()
    }

    fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        match &self.prior {
            Prior::Auto => {}
            Prior::Scalar(g) => {
                if !(*g > 0.0 && *g < 1.0) {
                    return Err(Error::invalid(format!("prior {g} must lie in (0, 1)")));
                }
            }
            Prior::Map(map) => {
                ensure_same_dims(self.dims(), map.dims())?;
                if map.probs().iter().any(|&g| g <= 0.0 || g >= 1.0) {
                    return Err(Error::invalid("prior map values must lie in (0, 1)"));
                }
            }
        }
        RaterPerformance::new(self.init.sensitivity, self.init.specificity)?;
        Ok(())
    }

    /// Mean foreground fraction over all raters, clamped into the open
    /// interval so all-empty or all-full inputs stay usable.
    pub fn auto_prior(&self) -> f64 {
        let ones: usize = self.raters.iter().map(BinaryMask::count_ones).sum();
        let total = self.raters.len() * self.raters[0].bits().len();
        (ones as f64 / total as f64).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP)
    }

    fn log_prior(&self) -> LogPrior {
        match &self.prior {
            Prior::Auto => LogPrior::Scalar(self.auto_prior().ln(), (1.0 - self.auto_prior()).ln()),
            Prior::Scalar(g) => LogPrior::Scalar(g.ln(), (1.0 - g).ln()),
            Prior::Map(map) => LogPrior::Map(map.probs().iter().map(|&g| (g.ln(), (1.0 - g).ln())).collect()),
        }
    }
}

enum LogPrior {
    Scalar(f64, f64),
    Map(Vec<(f64, f64)>),
}

impl LogPrior {
    fn at(&self, i: usize) -> (f64, f64) {
        match self {
            LogPrior::Scalar(a, b) => (*a, *b),
            LogPrior::Map(v) => v[i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct StapleResult {
    /// Posterior `P(C_i = 1 | B, p, q)` under the final parameters.
    pub posterior: ProbabilityMap,
    pub performance: Vec<RaterPerformance>,
    /// Number of completed M-steps.
    pub iterations: usize,
    pub converged: bool,
    /// Largest parameter change of the last M-step.
    pub final_delta: f64,
    /// Observed-data log-likelihood at each E-step, including the final one.
    pub log_likelihood: Vec<f64>,
    /// Number of parameter updates skipped because the posterior mass on
    /// one class was zero.
    pub frozen_updates: usize,
}

/// Posterior and log-likelihood for fixed rater parameters.
///
/// Per-pixel rater terms are summed in sorted order so the result is
/// bit-identical under any permutation of the raters.
pub fn e_step(problem: &StapleProblem, performance: &[RaterPerformance]) -> Result<(Vec<f64>, f64)> {
    problem.validate()?;
    if performance.len() != problem.raters.len() {
        return Err(Error::invalid(format!(
            "{} performance entries for {} raters",
            performance.len(),
            problem.raters.len()
        )));
    }
    let prior = problem.log_prior();
    Ok(e_step_inner(&problem.raters, &prior, performance))
}

struct LogParams {
    // (ln p, ln(1-p), ln q, ln(1-q))
    terms: Vec<(f64, f64, f64, f64)>,
}

impl LogParams {
    fn new(performance: &[RaterPerformance]) -> Self {
        Self {
            terms: performance
                .iter()
                .map(|r| {
                    (
                        r.sensitivity.ln(),
                        (-r.sensitivity).ln_1p(),
                        r.specificity.ln(),
                        (-r.specificity).ln_1p(),
                    )
                })
                .collect(),
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn pixel_terms(
    raters: &[BinaryMask],
    params: &LogParams,
    i: usize,
    fg: &mut Vec<f64>,
    bg: &mut Vec<f64>,
) -> (f64, f64) {
    fg.clear();
    bg.clear();
    for (r, &(lp, l1p, lq, l1q)) in raters.iter().zip(&params.terms) {
        if r.bits()[i] {
            fg.push(lp);
            bg.push(l1q);
        } else {
            fg.push(l1p);
            bg.push(lq);
        }
    }
    fg.sort_by(f64::total_cmp);
    bg.sort_by(f64::total_cmp);
    (fg.iter().sum(), bg.iter().sum())
}

fn e_step_inner(raters: &[BinaryMask], prior: &LogPrior, performance: &[RaterPerformance]) -> (Vec<f64>, f64) {
    let params = LogParams::new(performance);
    let n = raters[0].bits().len();
    let per_pixel: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(raters.len()), Vec::with_capacity(raters.len())),
            |(fg, bg), i| {
                let (rf, rb) = pixel_terms(raters, &params, i, fg, bg);
                let (lg, l1g) = prior.at(i);
                let log_a = lg + rf;
                let log_b = l1g + rb;
                let lse = log_add(log_a, log_b);
                let w = if log_a >= log_b {
                    1.0 / (1.0 + (log_b - log_a).exp())
                } else {
                    let e = (log_a - log_b).exp();
                    e / (1.0 + e)
                };
                (w, lse)
            },
        )
        .collect();
    let ll = chunked_sum(n, |i| per_pixel[i].1);
    (per_pixel.into_iter().map(|(w, _)| w).collect(), ll)
}

/// Runs EM to convergence (max parameter change below `tol`) or `max_iter`.
pub fn staple_fuse(problem: &StapleProblem) -> Result<StapleResult> {
    problem.validate()?;
    let prior = problem.log_prior();
    let raters = &problem.raters;
    let n = raters[0].bits().len();
    let mut performance = vec![problem.init; raters.len()];
    let mut log_likelihood = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut final_delta = f64::INFINITY;
    let mut frozen_updates = 0;

    while iterations < problem.max_iter {
        let (w, ll) = e_step_inner(raters, &prior, &performance);
        log_likelihood.push(ll);

        let fg_mass = chunked_sum(n, |i| w[i]);
        let bg_mass = chunked_sum(n, |i| 1.0 - w[i]);
        let updated: Vec<(RaterPerformance, usize)> = raters
            .par_iter()
            .zip(&performance)
            .map(|(r, old)| {
                let bits = r.bits();
                let mut next = *old;
                let mut frozen = 0;
                if fg_mass > 0.0 {
                    let hit = chunked_sum(n, |i| if bits[i] { w[i] } else { 0.0 });
                    next.sensitivity = (hit / fg_mass).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);
                } else {
                    frozen += 1;
                }
                if bg_mass > 0.0 {
                    let rej = chunked_sum(n, |i| if bits[i] { 0.0 } else { 1.0 - w[i] });
                    next.specificity = (rej / bg_mass).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);
                } else {
                    frozen += 1;
                }
                (next, frozen)
            })
            .collect();

        final_delta = updated
            .iter()
            .zip(&performance)
            .map(|((new, _), old)| {
                (new.sensitivity - old.sensitivity)
                    .abs()
                    .max((new.specificity - old.specificity).abs())
            })
            .fold(0.0, f64::max);
        frozen_updates += updated.iter().map(|(_, f)| f).sum::<usize>();
        performance = updated.into_iter().map(|(p, _)| p).collect();
        iterations += 1;
        if final_delta < problem.tol {
            converged = true;
            break;
        }
    }

    let (w, ll) = e_step_inner(raters, &prior, &performance);
    log_likelihood.push(ll);
    let (width, height) = problem.dims();
    Ok(StapleResult {
        posterior: ProbabilityMap::new(width, height, w)?,
        performance,
        iterations,
        converged,
        final_delta,
        log_likelihood,
        frozen_updates,
    })
}

pub const DEFAULT_CONSENSUS_THRESHOLD: f64 = 0.5;

/// Pixels whose posterior reaches `threshold` (ties count as foreground).
pub fn consensus_mask(result: &StapleResult, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "consensus threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(result.posterior.threshold(threshold))
}

/// Tight boxes around the connected regions of the consensus mask.
pub fn consensus_boxes(result: &StapleResult, threshold: f64, connectivity: Connectivity) -> Result<Vec<BoundingBox>> {
    Ok(mask_to_boxes(&consensus_mask(result, threshold)?, connectivity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::boxes_to_mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result_with_posterior(probs: Vec<f64>, w: usize, h: usize) -> StapleResult {
        StapleResult {
            posterior: ProbabilityMap::new(w, h, probs).unwrap(),
            performance: vec![],
            iterations: 0,
            converged: true,
            final_delta: 0.0,
            log_likelihood: vec![],
            frozen_updates: 0,
        }
    }

    fn random_raters(seed: u64, n: usize, w: usize, h: usize) -> Vec<BinaryMask> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = BinaryMask::from_fn(w, h, |x, y| {
            let dx = x as f64 - w as f64 / 2.0;
            let dy = y as f64 - h as f64 / 2.0;
            dx * dx + dy * dy < (w.min(h) as f64 / 3.0).powi(2)
        })
        .unwrap();
        (0..n)
            .map(|_| {
                let p: f64 = rng.random_range(0.6..0.99);
                let q: f64 = rng.random_range(0.6..0.99);
                let bits = truth
                    .bits()
                    .iter()
                    .map(|&t| {
                        let u: f64 = rng.random();
                        if t {
                            u < p
                        } else {
                            u >= q
                        }
                    })
                    .collect();
                BinaryMask::new(w, h, bits).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_rater_first_e_step() {
        let mask = boxes_to_mask(&[BoundingBox::new(2, 2, 3, 3).unwrap()], 8, 8).unwrap();
        let problem = StapleProblem::new(vec![mask.clone()])
            .unwrap()
            .with_prior(Prior::Scalar(0.5))
            .with_init(RaterPerformance::new(0.9, 0.9).unwrap());
        let perf = vec![problem.init];
        let (w, _) = e_step(&problem, &perf).unwrap();
        for (i, &b) in mask.bits().iter().enumerate() {
            let expected = if b { 0.9 } else { 0.1 };
            assert!((w[i] - expected).abs() < 1e-12, "pixel {i}: {}", w[i]);
        }
        let result = staple_fuse(&problem).unwrap();
        assert_eq!(consensus_mask(&result, 0.5).unwrap(), mask);
    }

    #[test]
    fn unanimous_raters_reach_upper_clamp() {
        let mask = boxes_to_mask(&[BoundingBox::new(1, 3, 4, 2).unwrap()], 8, 8).unwrap();
        let problem = StapleProblem::new(vec![mask.clone(); 3]).unwrap();
        let result = staple_fuse(&problem).unwrap();
        assert!(result.converged);
        assert_eq!(consensus_mask(&result, 0.5).unwrap(), mask);
        for p in &result.performance {
            assert!((p.sensitivity - (1.0 - PARAM_CLAMP)).abs() < 1e-12);
            assert!((p.specificity - (1.0 - PARAM_CLAMP)).abs() < 1e-12);
        }
    }

    #[test]
    fn consensus_threshold_rules() {
        let r = result_with_posterior(vec![0.9; 4], 2, 2);
        assert!(consensus_mask(&r, 0.5).unwrap().bits().iter().all(|&b| b));
        let r = result_with_posterior(vec![0.5; 4], 2, 2);
        assert!(consensus_mask(&r, 0.5).unwrap().bits().iter().all(|&b| b));
        let probs: Vec<f64> = (0..16)
            .map(|i| if (i % 4 + i / 4) % 2 == 0 { 0.7 } else { 0.3 })
            .collect();
        let r = result_with_posterior(probs.clone(), 4, 4);
        let m = consensus_mask(&r, 0.5).unwrap();
        for (i, &b) in m.bits().iter().enumerate() {
            assert_eq!(b, probs[i] == 0.7);
        }
        assert!(consensus_mask(&r, 1.0).is_err());
        assert!(consensus_mask(&r, 0.0).is_err());
    }

    #[test]
    fn consensus_boxes_cases() {
        let b = BoundingBox::new(3, 2, 4, 5).unwrap();
        let problem = StapleProblem::new(vec![boxes_to_mask(&[b], 12, 12).unwrap()]).unwrap();
        let result = staple_fuse(&problem).unwrap();
        assert_eq!(consensus_boxes(&result, 0.5, Connectivity::Eight).unwrap(), vec![b]);

        let empty = result_with_posterior(vec![0.0; 9], 3, 3);
        assert!(consensus_boxes(&empty, 0.5, Connectivity::Eight).unwrap().is_empty());
    }

    #[test]
    fn two_overlapping_raters_give_one_box() {
        let a = boxes_to_mask(&[BoundingBox::new(4, 4, 10, 10).unwrap()], 32, 32).unwrap();
        let b = boxes_to_mask(&[BoundingBox::new(6, 5, 10, 10).unwrap()], 32, 32).unwrap();
        let result = staple_fuse(&StapleProblem::new(vec![a, b]).unwrap()).unwrap();
        let boxes = consensus_boxes(&result, 0.5, Connectivity::Eight).unwrap();
        assert_eq!(boxes.len(), 1);
        // the box must be tight around the thresholded region
        let m = consensus_mask(&result, 0.5).unwrap();
        assert_eq!(m.bounding_box(), Some(boxes[0]));
        assert_eq!(m.count_ones(), boxes[0].area());
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(StapleProblem::new(vec![]).is_err());
        let a = BinaryMask::zeros(4, 4).unwrap();
        let b = BinaryMask::zeros(4, 5).unwrap();
        assert!(matches!(
            StapleProblem::new(vec![a.clone(), b]),
            Err(Error::DimensionMismatch { .. })
        ));
        let p = StapleProblem::new(vec![a.clone()])
            .unwrap()
            .with_prior(Prior::Scalar(1.0));
        assert!(staple_fuse(&p).is_err());
        let p = StapleProblem::new(vec![a]).unwrap().with_tol(0.0);
        assert!(staple_fuse(&p).is_err());
    }

    #[test]
    fn all_empty_raters_are_handled() {
        let a = BinaryMask::zeros(6, 6).unwrap();
        let result = staple_fuse(&StapleProblem::new(vec![a.clone(), a]).unwrap()).unwrap();
        assert!(consensus_mask(&result, 0.5).unwrap().is_empty());
        assert!(result.posterior.probs().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn frozen_parameter_is_reported() {
        // a prior map pinning every pixel to background drives the
        // foreground posterior mass to exactly zero
        let a = BinaryMask::zeros(4, 4).unwrap();
        let prior = ProbabilityMap::filled(4, 4, 1e-320).unwrap();
        let result = staple_fuse(
            &StapleProblem::new(vec![a])
                .unwrap()
                .with_prior(Prior::Map(prior))
                .with_max_iter(3),
        )
        .unwrap();
        assert!(result.frozen_updates > 0);
        assert_eq!(result.performance[0].sensitivity, DEFAULT_INIT);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn log_likelihood_never_decreases(seed in any::<u64>(), n in 1usize..6) {
            let raters = random_raters(seed, n, 20, 16);
            let result = staple_fuse(&StapleProblem::new(raters).unwrap()).unwrap();
            for pair in result.log_likelihood.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-9, "{} -> {}", pair[0], pair[1]);
            }
        }

        #[test]
        fn rater_permutation_equivariance(seed in any::<u64>(), n in 2usize..6, rot in 1usize..5) {
            let raters = random_raters(seed, n, 16, 16);
            let mut permuted = raters.clone();
            permuted.rotate_left(rot % n);
            let a = staple_fuse(&StapleProblem::new(raters).unwrap()).unwrap();
            let b = staple_fuse(&StapleProblem::new(permuted).unwrap()).unwrap();
            let bits = |r: &StapleResult| r.posterior.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
            let mut expected = a.performance.clone();
            expected.rotate_left(rot % n);
            prop_assert_eq!(expected, b.performance);
        }

        #[test]
        fn label_symmetry(seed in any::<u64>(), n in 1usize..5, g in 0.05f64..0.95) {
            let raters = random_raters(seed, n, 16, 12);
            let flipped: Vec<_> = raters.iter().map(BinaryMask::complement).collect();
            let tol = 1e-9;
            let a = staple_fuse(&StapleProblem::new(raters).unwrap().with_prior(Prior::Scalar(g)).with_tol(tol)).unwrap();
            let b = staple_fuse(&StapleProblem::new(flipped).unwrap().with_prior(Prior::Scalar(1.0 - g)).with_tol(tol)).unwrap();
            for (wa, wb) in a.posterior.probs().iter().zip(b.posterior.probs()) {
                prop_assert!((wa - (1.0 - wb)).abs() < 1e-6);
            }
            for (pa, pb) in a.performance.iter().zip(&b.performance) {
                prop_assert!((pa.sensitivity - pb.specificity).abs() < 1e-6);
                prop_assert!((pa.specificity - pb.sensitivity).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let raters = random_raters(7, 4, 64, 64);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| staple_fuse(&StapleProblem::new(raters.clone()).unwrap()).unwrap())
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.performance, b.performance);
        assert_eq!(a.log_likelihood, b.log_likelihood);
    }
}
