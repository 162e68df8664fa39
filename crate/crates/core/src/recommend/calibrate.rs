//! Fitting the noisy-greedy noise level to a target mean utility.
//!
//! Utility is evaluated with common random numbers (the same per-instance
//! seeds at every noise level), which keeps the mean close to monotone in the
//! noise level and makes bisection well behaved.

use crate::error::{Error, Result};
use crate::knapsack::{SolvedInstance, UtilityKind};
use crate::stats::MeanSd;

use super::{evaluate_recommender, Recommender};

/// Mean economic utility of the six treatment recommenders, weakest first.
pub const TREATMENT_TARGETS: [(&str, f64); 6] = [
    ("q1", 0.717),
    ("q2", 0.800),
    ("q3", 0.844),
    ("q4", 0.884),
    ("q5", 0.899),
    ("q6", 0.920),
];

const SIGMA_RESOLUTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub tolerance: f64,
    pub max_steps: usize,
    /// Upper end of the bracket; large enough that item order is effectively random.
    pub max_sigma: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            tolerance: 0.01,
            max_steps: 60,
            max_sigma: 16.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub recommender: Recommender,
    pub sigma: f64,
    /// Utility summary on the calibration set at `sigma`.
    pub achieved: MeanSd,
    /// Every `(sigma, mean utility)` evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

pub fn calibrate_to_target(
    target: f64,
    eval_set: &[SolvedInstance],
    seed: u64,
    label: impl Into<String>,
    opts: CalibrationOptions,
) -> Result<Calibration> {
    if !(target > 0.5 && target <= 1.0) {
        return Err(Error::Parameter(format!(
            "target utility {target} outside (0.5, 1.0]"
        )));
    }
    if eval_set.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let label = label.into();
    let mut trace = Vec::new();
    let mut eval = |sigma: f64| -> Result<MeanSd> {
        let rec = Recommender::noisy_greedy(label.clone(), sigma);
        let m = evaluate_recommender(&rec, eval_set, UtilityKind::Economic, seed)?;
        trace.push((sigma, m.mean));
        Ok(m)
    };
    let done = |sigma: f64, achieved: MeanSd, trace: Vec<(f64, f64)>| Calibration {
        recommender: Recommender::noisy_greedy(label.clone(), sigma),
        sigma,
        achieved,
        trace,
    };

    let at_zero = eval(0.0)?;
    if (at_zero.mean - target).abs() <= opts.tolerance {
        return Ok(done(0.0, at_zero, trace));
    }
    if at_zero.mean < target {
        return Err(Error::Calibration(format!(
            "target {target} exceeds noiseless greedy utility {:.4}",
            at_zero.mean
        )));
    }
    let at_max = eval(opts.max_sigma)?;
    if at_max.mean > target + opts.tolerance {
        return Err(Error::Calibration(format!(
            "target {target} below utility {:.4} at maximum noise {}",
            at_max.mean, opts.max_sigma
        )));
    }
    if (at_max.mean - target).abs() <= opts.tolerance {
        return Ok(done(opts.max_sigma, at_max, trace));
    }
    // Bisect to convergence and keep the closest level seen, rather than
    // stopping at the first one inside the tolerance band.
    let (mut lo, mut hi) = (0.0, opts.max_sigma);
    let mut best: Option<(f64, MeanSd)> = None;
    for _ in 0..opts.max_steps {
        let mid = 0.5 * (lo + hi);
        let m = eval(mid)?;
        if best.is_none_or(|(_, b)| (m.mean - target).abs() < (b.mean - target).abs()) {
            best = Some((mid, m));
        }
        if m.mean == target || hi - lo < SIGMA_RESOLUTION {
            break;
        }
        if m.mean > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    match best {
        Some((sigma, m)) if (m.mean - target).abs() <= opts.tolerance => Ok(done(sigma, m, trace)),
        _ => Err(Error::Calibration(format!(
            "no noise level within {} of target {target} after {} steps",
            opts.tolerance, opts.max_steps
        ))),
    }
}
