//! Acceptance checks. Each function runs one criterion with fixed seeds and
//! reports pass/fail with the measured numbers.

use std::fmt;
use std::time::{Duration, Instant};

use crate::analysis::{estimate_ccf_from_trials, simulate_study_log, config_with};
use crate::dynamics::{
    check_proposition, random_side_ccf, run_performative_loop, simulate_clp, Ccf, LearnerMap, Side,
};
use crate::error::Result;
use crate::human::{apply_human, measure_delta, HumanModel};
use crate::knapsack::{
    random_fill, solve_bruteforce, solve_exact, weight_value_correlation, GeneratorParams,
    KnapsackInstance, SolvedInstance, UtilityKind,
};
use crate::recommend::{
    calibrate_to_target, evaluate_recommender, CalibrationOptions, Recommend, Recommender,
    TrainingConfig, TREATMENT_TARGETS,
};
use crate::rng::derive_seed;
use crate::study::{compute_payment, Bonus, MlArm};

const SEED: u64 = 20_240_601;

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub type Criterion = fn() -> CriterionResult;

pub const ALL: [(&str, Criterion); 10] = [
    ("solver", solver_correctness),
    ("generator", generator_fidelity),
    ("random-baseline", random_baseline),
    ("calibration", calibration),
    ("equilibrium", equilibrium),
    ("propositions", propositions),
    ("best-of-two", best_of_two_dominance),
    ("payments", payments),
    ("closed-loop", closed_loop),
    ("ccf-self-consistency", ccf_self_consistency),
];

pub fn run_all() -> Vec<CriterionResult> {
    ALL.iter().map(|(_, f)| f()).collect()
}

/// Exact DP agrees with exhaustive search on 500 instances in under 10 s.
pub fn solver_correctness() -> CriterionResult {
    let start = Instant::now();
    let mut r = timed("solver", || {
        let instances = GeneratorParams::default().generate_batch(500, derive_seed(SEED, 1))?;
        let mut mismatches = 0;
        for x in &instances {
            if solve_exact(x)?.total_value() != solve_bruteforce(x)?.total_value() {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("500 instances, {mismatches} value mismatches")))
    });
    r.passed &= start.elapsed() < Duration::from_secs(10);
    r
}

/// 10,000 generated instances satisfy the invariants and have mean
/// weight-value correlation in [0.96, 1.00], in under 5 s.
pub fn generator_fidelity() -> CriterionResult {
    let start = Instant::now();
    let mut r = timed("generator", || {
        let p = GeneratorParams::default();
        let instances = p.generate_batch(10_000, derive_seed(SEED, 2))?;
        let mut bad = 0;
        let mut sum_r = 0.0;
        for x in &instances {
            let ok = x.item_count() == p.items
                && (p.w_min..=p.w_max).contains(&x.capacity())
                && x.weights().iter().all(|&w| w >= 1 && w <= x.capacity())
                && x.values().iter().all(|&v| v >= 1)
                && KnapsackInstance::new(x.weights().to_vec(), x.values().to_vec(), x.capacity(), x.seed())
                    .is_ok();
            bad += usize::from(!ok);
            sum_r += weight_value_correlation(x)?;
        }
        let mean_r = sum_r / instances.len() as f64;
        Ok((
            bad == 0 && (0.96..=1.0).contains(&mean_r),
            format!("10000 instances, {bad} invalid, mean r = {mean_r:.4}"),
        ))
    });
    r.passed &= start.elapsed() < Duration::from_secs(5);
    r
}

/// Random fill averages between 55% and 65% of the optimum.
pub fn random_baseline() -> CriterionResult {
    timed("random-baseline", || {
        let xs = SolvedInstance::solve_all(
            GeneratorParams::default().generate_batch(10_000, derive_seed(SEED, 3))?,
        )?;
        let random = |x: &KnapsackInstance, seed: u64| Ok(random_fill(x, seed));
        let m = evaluate_recommender(&random, &xs, UtilityKind::Economic, derive_seed(SEED, 4))?;
        Ok((
            (0.55..=0.65).contains(&m.mean),
            format!("mean U_econ = {:.4} over 10000 instances", m.mean),
        ))
    })
}

/// Each treatment mean is hit within 0.02 on 2,000 held-out instances.
pub fn calibration() -> CriterionResult {
    timed("calibration", || {
        let p = GeneratorParams::default();
        let fit = SolvedInstance::solve_all(p.generate_batch(2_000, derive_seed(SEED, 5))?)?;
        let held = SolvedInstance::solve_all(p.generate_batch(2_000, derive_seed(SEED, 6))?)?;
        let mut ok = true;
        let mut parts = Vec::new();
        for (label, target) in TREATMENT_TARGETS {
            let cal = calibrate_to_target(target, &fit, derive_seed(SEED, 7), label, CalibrationOptions::default())?;
            let m = evaluate_recommender(&cal.recommender, &held, UtilityKind::Economic, derive_seed(SEED, 8))?;
            ok &= (m.mean - target).abs() <= 0.02;
            parts.push(format!("{label} {:.3}", m.mean));
        }
        Ok((ok, format!("held-out means: {}", parts.join(", "))))
    })
}

/// The bundled CCF path from 0.717 settles in [0.91, 0.94] within 10 epochs,
/// and the first knot's improvement is 0.177.
pub fn equilibrium() -> CriterionResult {
    timed("equilibrium", || {
        let ccf = Ccf::empirical();
        let path = simulate_clp(&ccf, 0.717, 10, 0.01, LearnerMap::Perfect)?;
        let first_delta = ccf.points()[0].delta;
        let u = path.final_utility();
        let ok = path.stable_at.is_some_and(|t| t <= 10)
            && (0.91..=0.94).contains(&u)
            && (first_delta - 0.177).abs() <= 0.005;
        Ok((
            ok,
            format!(
                "stable at epoch {}, utility {u:.4}, first-knot delta {first_delta:.3}",
                path.stable_at.map_or("never".to_string(), |t| t.to_string())
            ),
        ))
    })
}

/// 1,000 above-identity and 1,000 below-identity random CCFs give monotone
/// paths that stabilize in time.
pub fn propositions() -> CriterionResult {
    timed("propositions", || {
        let mut failures = 0;
        for side in [Side::Improvement, Side::Harm] {
            for k in 0..1_000u64 {
                let seed = derive_seed(SEED ^ side as u64, k);
                let ccf = random_side_ccf(side, (k % 6) as usize, seed);
                let report = check_proposition(&ccf, side, 10, 0.01, derive_seed(seed, 1))?;
                failures += report.counterexamples.len();
            }
        }
        Ok((failures == 0, format!("2 x 1000 CCFs x 10 starts, {failures} failures")))
    })
}

/// Best-of-two never scores below its own solution or the recommendation.
pub fn best_of_two_dominance() -> CriterionResult {
    timed("best-of-two", || {
        let xs = SolvedInstance::solve_all(
            GeneratorParams::default().generate_batch(10_000, derive_seed(SEED, 9))?,
        )?;
        let recommenders: Vec<Recommender> = [0.55, 0.41, 0.37, 0.32, 0.30, 0.28, 0.0, 4.0]
            .iter()
            .enumerate()
            .map(|(k, &s)| Recommender::noisy_greedy(format!("r{k}"), s))
            .collect();
        let budget = 60;
        let mut violations = 0;
        for (k, x) in xs.iter().enumerate() {
            let rec = &recommenders[k % recommenders.len()];
            let seed = derive_seed(SEED, 10_000 + k as u64);
            let y = rec.recommend(&x.instance, seed)?;
            let both = apply_human(&HumanModel::BestOfTwo { budget }, x, &y, seed)?;
            let own = apply_human(&HumanModel::Independent { budget }, x, &y, seed)?;
            for kind in UtilityKind::ALL {
                let best = x.utility(kind, &both)?;
                if best < x.utility(kind, &own)?.max(x.utility(kind, &y)?) {
                    violations += 1;
                }
            }
        }
        Ok((violations == 0, format!("10000 triples, {violations} violations")))
    })
}

pub fn payments() -> CriterionResult {
    timed("payments", || {
        let cases = [(85.0, Bonus::B2, 230), (70.0, Bonus::B20, 200), (69.9, Bonus::B10, 0)];
        let got: Vec<u32> = cases.iter().map(|&(m, b, _)| compute_payment(m, b)).collect();
        let ok = cases.iter().zip(&got).all(|(c, &g)| c.2 == g);
        Ok((ok, format!("(85,b2)->{} (70,b20)->{} (69.9,b10)->{}", got[0], got[1], got[2])))
    })
}

/// Best-of-two humans, 500 instances per epoch, 3 epochs: collaborative
/// utility never drops by more than 0.02 and training loss falls.
pub fn closed_loop() -> CriterionResult {
    timed("closed-loop", || {
        let rec0 = Recommender::noisy_greedy("q1", 0.55);
        let trace = run_performative_loop(
            &rec0,
            &HumanModel::BestOfTwo { budget: 200 },
            3,
            500,
            &TrainingConfig::default(),
            UtilityKind::Economic,
            derive_seed(SEED, 11),
        )?;
        let collab: Vec<f64> = trace.records.iter().map(|r| r.collab_utility).collect();
        let monotone = collab.windows(2).all(|w| w[1] >= w[0] - 0.02);
        let (first, last) = (trace.initial_loss(), trace.final_loss());
        Ok((
            monotone && last < first,
            format!(
                "collab {}, loss {first:.4} -> {last:.4}",
                collab.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(" ")
            ),
        ))
    })
}

/// CCF points estimated from a simulated study log match the simulated human's
/// directly measured improvements within two clustered standard errors.
pub fn ccf_self_consistency() -> CriterionResult {
    timed("ccf-self-consistency", || {
        let arms = [
            (MlArm::Q1, Recommender::noisy_greedy("q1", 0.55)),
            (MlArm::Q6, Recommender::noisy_greedy("q6", 0.28)),
        ];
        let human = HumanModel::AnchoredSearch { budget: 30 };
        let log = simulate_study_log(
            config_with(arms.clone()),
            &[MlArm::Q1, MlArm::Q6],
            &human,
            40,
            derive_seed(SEED, 12),
        )?;
        let est = estimate_ccf_from_trials(&log, UtilityKind::Economic)?;
        let reference = SolvedInstance::solve_all(
            GeneratorParams::default().generate_batch(4_000, derive_seed(SEED, 13))?,
        )?;
        let mut ok = est.points.len() == arms.len();
        let mut parts = Vec::new();
        for (arm, rec) in &arms {
            let measured = measure_delta(&human, rec, &reference, UtilityKind::Economic, derive_seed(SEED, 14))?;
            match est.points.iter().find(|p| p.label == arm.name()) {
                Some(p) => {
                    ok &= (p.delta - measured.mean).abs() <= 2.0 * p.se;
                    parts.push(format!("{arm} {:.4}±{:.4} vs {:.4}", p.delta, p.se, measured.mean));
                }
                None => ok = false,
            }
        }
        Ok((ok, parts.join(", ")))
    })
}
