//! Cluster-robust summaries of study logs: CCF estimation, follow/ignore
//! decomposition and the per-trial CSV used by external statistics tools.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{csv_error, CcfPoint, Provenance};
use crate::error::{Error, Result};
use crate::human::{apply_human, HumanModel};
use crate::knapsack::{Solution, SolvedInstance, UtilityKind};
use crate::recommend::Recommender;
use crate::rng;
use crate::study::{
    Assignment, Bonus, ExportFilter, ManualClock, MlArm, StudyConfig, StudyService, SubmitRequest,
    TreatmentConfig, TrialExport, TrialPhase,
};

/// Header line stating the standard-error estimator used in estimate outputs.
pub const SE_NOTE: &str = "# se: CR0 cluster-robust (no small-sample correction), clustered by session";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteredMean {
    pub mean: f64,
    pub se: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
}

/// Mean with CR0 standard error:
/// `var = (1/N²) · Σ_g (Σ_{i∈g} (x_i − mean))²`.
pub fn clustered_mean<C: Eq + Hash>(values: &[f64], clusters: &[C]) -> Result<ClusteredMean> {
    if values.len() != clusters.len() {
        return Err(Error::Shape {
            expected: values.len(),
            actual: clusters.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sums: HashMap<&C, f64> = HashMap::new();
    for (x, c) in values.iter().zip(clusters) {
        *sums.entry(c).or_default() += x - mean;
    }
    if sums.len() < 2 {
        return Err(Error::DegenerateCluster(sums.len()));
    }
    let var = sums.values().map(|s| s * s).sum::<f64>() / (n * n);
    Ok(ClusteredMean {
        mean,
        se: var.sqrt(),
        n_obs: values.len(),
        n_clusters: sums.len(),
    })
}

/// One trial reduced to what CCF estimation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub arm: String,
    pub cluster: String,
    pub model_utility: f64,
    pub collab_utility: f64,
}

/// Observations for every trial that carried a recommendation.
pub fn observations(trials: &[TrialExport], kind: UtilityKind) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for t in trials {
        if let Some(model) = t.recommendation_utility(kind)? {
            out.push(Observation {
                arm: t.treatment.ml_arm.to_string(),
                cluster: t.session_id.clone(),
                model_utility: model,
                collab_utility: t.utility(kind),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcfEstimate {
    /// Sorted by model utility.
    pub points: Vec<CcfPoint>,
    pub warnings: Vec<String>,
}

/// Per arm: plain mean model utility, clustered mean collaborative utility,
/// and the clustered SE of the per-trial improvement. Arms with fewer than two
/// sessions are skipped with a warning.
pub fn estimate_ccf(obs: &[Observation]) -> CcfEstimate {
    let mut by_arm: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in obs {
        by_arm.entry(&o.arm).or_default().push(o);
    }
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for (arm, rows) in by_arm {
        let clusters: Vec<&str> = rows.iter().map(|o| o.cluster.as_str()).collect();
        let collab: Vec<f64> = rows.iter().map(|o| o.collab_utility).collect();
        let deltas: Vec<f64> = rows.iter().map(|o| o.collab_utility - o.model_utility).collect();
        match (clustered_mean(&collab, &clusters), clustered_mean(&deltas, &clusters)) {
            (Ok(c), Ok(d)) => {
                let model = rows.iter().map(|o| o.model_utility).sum::<f64>() / rows.len() as f64;
                points.push(CcfPoint::new(model, c.mean, d.se, arm, Provenance::Estimated));
            }
            (Err(e), _) | (_, Err(e)) => warnings.push(format!("arm {arm} skipped: {e}")),
        }
    }
    points.sort_by(|a, b| a.model_utility.total_cmp(&b.model_utility));
    CcfEstimate { points, warnings }
}

/// CCF points from exported trials; model arms with no trials are reported
/// as warnings.
pub fn estimate_ccf_from_trials(trials: &[TrialExport], kind: UtilityKind) -> Result<CcfEstimate> {
    let obs = observations(trials, kind)?;
    if obs.is_empty() {
        return Err(Error::Data("no trials with recommendations".into()));
    }
    let mut est = estimate_ccf(&obs);
    for arm in MlArm::MODELS {
        if !obs.iter().any(|o| o.arm == arm.name()) {
            est.warnings.push(format!("arm {arm}: no trials"));
        }
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDecomposition {
    pub arm: String,
    pub trials: usize,
    /// Share of trials submitting exactly the recommendation.
    pub follow_rate: f64,
    /// Among deviating trials, the share worth less than the recommendation.
    /// Absent when nobody deviated.
    pub inferior_rate: Option<f64>,
}

pub fn follow_ignore_decomposition(trials: &[TrialExport]) -> Result<Vec<ArmDecomposition>> {
    #[derive(Default)]
    struct Tally {
        trials: usize,
        followed: usize,
        inferior: usize,
    }
    let mut by_arm: BTreeMap<String, Tally> = BTreeMap::new();
    for t in trials {
        let Some(rec) = t.recommended_solution()? else { continue };
        let sub = t.submitted_solution()?;
        let tally = by_arm.entry(t.treatment.ml_arm.to_string()).or_default();
        tally.trials += 1;
        if sub == rec {
            tally.followed += 1;
        } else if sub.total_value() < rec.total_value() {
            tally.inferior += 1;
        }
    }
    Ok(by_arm
        .into_iter()
        .map(|(arm, t)| {
            let deviating = t.trials - t.followed;
            ArmDecomposition {
                arm,
                trials: t.trials,
                follow_rate: t.followed as f64 / t.trials as f64,
                inferior_rate: (deviating > 0).then(|| t.inferior as f64 / deviating as f64),
            }
        })
        .collect())
}

/// Flat per-trial row for external regression tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub session_id: String,
    pub bonus: Bonus,
    pub ml_arm: MlArm,
    pub quiz: bool,
    pub excluded: bool,
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub capacity: u32,
    pub optimum: u64,
    pub submitted_value: u64,
    pub recommendation_value: Option<u64>,
    pub followed: Option<bool>,
    pub elapsed_ms: u64,
    pub auto_submitted: bool,
    pub econ_utility: f64,
    pub opt_utility: f64,
    pub rec_econ_utility: Option<f64>,
    pub rec_opt_utility: Option<f64>,
}

impl TrialRow {
    pub fn from_export(t: &TrialExport) -> Result<Self> {
        let sub = t.submitted_solution()?;
        let rec = t.recommended_solution()?;
        Ok(Self {
            session_id: t.session_id.clone(),
            bonus: t.treatment.bonus,
            ml_arm: t.treatment.ml_arm,
            quiz: t.treatment.comprehension_quiz,
            excluded: t.excluded,
            phase: t.phase,
            problem_index: t.problem_index,
            capacity: t.instance.capacity(),
            optimum: t.optimum,
            submitted_value: sub.total_value(),
            recommendation_value: rec.as_ref().map(Solution::total_value),
            followed: rec.as_ref().map(|r| *r == sub),
            elapsed_ms: t.elapsed_ms,
            auto_submitted: t.auto_submitted,
            econ_utility: t.econ_utility,
            opt_utility: t.opt_utility,
            rec_econ_utility: t.recommendation_utility(UtilityKind::Economic)?,
            rec_opt_utility: t.recommendation_utility(UtilityKind::Optimality)?,
        })
    }
}

pub fn write_trial_csv<W: Write>(out: W, trials: &[TrialExport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        w.serialize(TrialRow::from_export(t)?).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trial_csv<R: Read>(input: R) -> Result<Vec<TrialRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<TrialRow>, _>>()
        .map_err(csv_error)
}

/// Economic-utility improvements over the recommendation of one arm's main
/// trials, read from a per-trial CSV.
pub fn read_delta_table(path: &Path, arm: &str) -> Result<Vec<f64>> {
    let arm: MlArm = arm.parse()?;
    let rows = read_trial_csv(std::fs::File::open(path)?)?;
    let deltas: Vec<f64> = rows
        .iter()
        .filter(|r| r.ml_arm == arm && r.phase == TrialPhase::Main && !r.excluded)
        .filter_map(|r| r.rec_econ_utility.map(|m| r.econ_utility - m))
        .collect();
    if deltas.is_empty() {
        return Err(Error::Data(format!("no {arm} trials with recommendations in {}", path.display())));
    }
    Ok(deltas)
}

/// Runs complete study sessions through the study service with a simulated
/// participant and returns the exported main trials.
pub fn simulate_study_log(
    config: StudyConfig,
    arms: &[MlArm],
    human: &HumanModel,
    sessions_per_arm: usize,
    seed: u64,
) -> Result<Vec<TrialExport>> {
    human.validate()?;
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let svc = StudyService::in_memory(config, clock.clone());
    for (a, &arm) in arms.iter().enumerate() {
        let quiz = arm != MlArm::None;
        let treatment = TreatmentConfig::new(Bonus::B10, arm, quiz)?;
        for k in 0..sessions_per_arm {
            let session_seed = rng::derive_seed(seed, (a * sessions_per_arm + k) as u64);
            let id = svc
                .create_session(Assignment::Forced { treatment }, session_seed)?
                .session_id;
            svc.advance(&id)?;
            for phase in [TrialPhase::Practice, TrialPhase::Main] {
                loop {
                    let view = match svc.next_problem(&id) {
                        Ok(v) => v,
                        Err(Error::Phase(_)) => break,
                        Err(e) => return Err(e),
                    };
                    let spec = svc
                        .session(&id)?
                        .problem(phase, view.problem_index)
                        .cloned()
                        .expect("served problem exists");
                    let solved = SolvedInstance {
                        optimum: spec.optimum,
                        instance: spec.instance,
                    };
                    let rec = match view.recommendation {
                        Some(sel) => Solution::from_selection(&solved.instance, sel)?,
                        None => Solution::empty(&solved.instance),
                    };
                    let human_seed = rng::derive_seed(session_seed, 0x40 + view.problem_index as u64);
                    let label = apply_human(human, &solved, &rec, human_seed)?;
                    clock.advance(60_000);
                    svc.submit_solution(
                        &id,
                        &SubmitRequest {
                            problem_index: view.problem_index,
                            selection: label.into_selection(),
                            client_elapsed_ms: Some(60_000),
                            auto_submitted: false,
                        },
                    )?;
                }
                svc.advance(&id)?;
            }
            svc.finalize(&id)?;
        }
    }
    svc.export_trials(&ExportFilter::default())
}

/// Study config whose model arms all serve `recommenders`, keyed by arm.
pub fn config_with(recommenders: impl IntoIterator<Item = (MlArm, Recommender)>) -> StudyConfig {
    StudyConfig::new(recommenders.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn clustered_mean_examples() {
        let m = clustered_mean(&[0.0, 1.0], &[1, 2]).unwrap();
        assert!(close(m.mean, 0.5));
        assert!(close(m.se, (0.5f64 / 4.0).sqrt()));
        assert_eq!((m.n_obs, m.n_clusters), (2, 2));

        let z = clustered_mean(&[1.0, 3.0, 1.0, 3.0], &["a", "a", "b", "b"]).unwrap();
        assert!(close(z.se, 0.0));

        assert!(matches!(
            clustered_mean(&[1.0, 2.0], &[7, 7]),
            Err(Error::DegenerateCluster(1))
        ));
        assert!(matches!(clustered_mean(&[1.0], &[1, 2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn singleton_clusters_equal_robust_formula() {
        let xs: Vec<f64> = (0..37).map(|k| ((k * 7919) % 101) as f64 / 101.0).collect();
        let ids: Vec<usize> = (0..xs.len()).collect();
        let m = clustered_mean(&xs, &ids).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let hc0 = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n * n)).sqrt();
        assert!((m.se - hc0).abs() < 1e-15);
    }

    #[test]
    fn summary_statistic_points() {
        // q1: recommendations average 0.717, submissions 0.894; q6: 0.920 and 0.926.
        let mut obs = Vec::new();
        for (arm, model, collab) in [("q1", 0.717, 0.894), ("q6", 0.920, 0.926)] {
            for s in 0..4 {
                for (dm, dc) in [(0.05, -0.02), (-0.05, 0.02)] {
                    obs.push(Observation {
                        arm: arm.into(),
                        cluster: format!("{arm}-{s}"),
                        model_utility: model + dm,
                        collab_utility: collab + dc,
                    });
                }
            }
        }
        let est = estimate_ccf(&obs);
        assert!(est.warnings.is_empty());
        let p = &est.points;
        assert_eq!((p[0].label.as_str(), p[1].label.as_str()), ("q1", "q6"));
        assert!((p[0].model_utility - 0.717).abs() < 1e-12 && (p[0].collab_utility - 0.894).abs() < 1e-12);
        assert!((p[1].model_utility - 0.920).abs() < 1e-12 && (p[1].collab_utility - 0.926).abs() < 1e-12);
        assert!((p[0].delta - 0.177).abs() < 1e-12);
    }

    #[test]
    fn single_session_arm_is_skipped() {
        let obs = vec![
            Observation { arm: "q2".into(), cluster: "a".into(), model_utility: 0.8, collab_utility: 0.9 },
            Observation { arm: "q2".into(), cluster: "a".into(), model_utility: 0.7, collab_utility: 0.9 },
        ];
        let est = estimate_ccf(&obs);
        assert!(est.points.is_empty());
        assert_eq!(est.warnings.len(), 1);
    }

    fn small_config() -> StudyConfig {
        config_with([
            (MlArm::Q1, Recommender::noisy_greedy("q1", 0.55)),
            (MlArm::Q6, Recommender::noisy_greedy("q6", 0.28)),
        ])
    }

    #[test]
    fn synthetic_copycat_and_best_of_two_logs() {
        let arms = [MlArm::Q1, MlArm::Q6];
        let copy = simulate_study_log(small_config(), &arms, &HumanModel::Copycat, 3, 1).unwrap();
        assert_eq!(copy.len(), 60);
        let est = estimate_ccf_from_trials(&copy, UtilityKind::Economic).unwrap();
        assert_eq!(est.points.len(), 2);
        assert!(est.points.iter().all(|p| p.delta == 0.0));
        assert_eq!(est.warnings.len(), 4, "q2..q5 missing");
        for d in follow_ignore_decomposition(&copy).unwrap() {
            assert_eq!(d.follow_rate, 1.0);
            assert_eq!(d.inferior_rate, None);
        }

        let best = simulate_study_log(small_config(), &arms, &HumanModel::BestOfTwo { budget: 60 }, 3, 2)
            .unwrap();
        for kind in UtilityKind::ALL {
            let est = estimate_ccf_from_trials(&best, kind).unwrap();
            assert!(est.points.iter().all(|p| p.delta >= 0.0));
        }
        for d in follow_ignore_decomposition(&best).unwrap() {
            assert_eq!(d.inferior_rate.unwrap_or(0.0), 0.0);
        }
    }

    #[test]
    fn independent_humans_sometimes_do_worse() {
        let log = simulate_study_log(
            small_config(),
            &[MlArm::Q6],
            &HumanModel::Independent { budget: 20 },
            5,
            3,
        )
        .unwrap();
        let d = &follow_ignore_decomposition(&log).unwrap()[0];
        assert_eq!(d.arm, "q6");
        // Frozen from this seeded run.
        assert_eq!(d.trials, 50);
        assert!((d.follow_rate - 0.02).abs() < 1e-12);
        assert!((d.inferior_rate.unwrap() - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn trial_csv_round_trip_and_delta_table() {
        let log = simulate_study_log(
            small_config(),
            &[MlArm::Q1],
            &HumanModel::AnchoredSearch { budget: 40 },
            2,
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        write_trial_csv(std::fs::File::create(&path).unwrap(), &log).unwrap();
        let rows = read_trial_csv(std::fs::File::open(&path).unwrap()).unwrap();
        let direct: Vec<TrialRow> = log.iter().map(|t| TrialRow::from_export(t).unwrap()).collect();
        assert_eq!(rows, direct);
        let deltas = read_delta_table(&path, "q1").unwrap();
        assert_eq!(deltas.len(), 20);
        assert!(deltas.iter().all(|&d| d >= 0.0));
        assert!(matches!(read_delta_table(&path, "q4"), Err(Error::Data(_))));

        let config = dir.path().join("human.toml");
        std::fs::write(&config, "kind = \"empirical_tabular\"\ndeltas_file = \"trials.csv\"\narm = \"q1\"\n").unwrap();
        match HumanModel::load(&config).unwrap() {
            HumanModel::EmpiricalTabular { deltas: d, .. } => assert_eq!(d, deltas),
            other => panic!("{other:?}"),
        }
    }
}
