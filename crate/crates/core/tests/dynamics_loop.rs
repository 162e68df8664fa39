use collab_core::dynamics::{
    check_proposition, find_fixed_points, random_side_ccf, run_performative_loop, simulate_clp, Ccf,
    LearnerMap, Side, Stability,
};
use collab_core::human::HumanModel;
use collab_core::knapsack::{GeneratorParams, UtilityKind};
use collab_core::recommend::{Recommender, TrainingConfig};
use proptest::prelude::*;

#[test]
fn empirical_ccf_has_one_attracting_point() {
    let fps = find_fixed_points(&Ccf::empirical(), 0.01);
    assert_eq!(fps.len(), 1);
    assert!((0.92..=0.93).contains(&fps[0].utility));
    assert_eq!(fps[0].stability, Stability::Attracting);
}

#[test]
fn best_of_two_loop_golden_trace() {
    let cfg = TrainingConfig {
        epochs: 5,
        ..TrainingConfig::default()
    };
    let trace = run_performative_loop(
        &Recommender::noisy_greedy("q1", 0.55),
        &HumanModel::BestOfTwo { budget: 100 },
        3,
        200,
        &cfg,
        UtilityKind::Economic,
        7,
    )
    .unwrap();
    let golden = [
        (0.735401162991176, 0.9256687210637891),
        (0.6942451738787974, 0.9198133230916357),
        (0.7475782362088187, 0.9229892978451935),
    ];
    for (r, (model, collab)) in trace.records.iter().zip(golden) {
        assert!((r.model_utility - model).abs() < 1e-9, "{r:?}");
        assert!((r.collab_utility - collab).abs() < 1e-9, "{r:?}");
        assert!(r.collab_utility >= r.model_utility);
    }
    for w in trace.records.windows(2) {
        assert!(w[1].collab_utility >= w[0].collab_utility - 0.02);
    }
}

#[test]
fn copycat_loop_on_a_learnable_pattern_reduces_loss() {
    // With copycat humans the labels are the model's own greedy outputs, a
    // deterministic function of the instance.
    let cfg = TrainingConfig {
        epochs: 8,
        hidden: vec![64, 64],
        ..TrainingConfig::default()
    };
    let trace = run_performative_loop(
        &Recommender::greedy("g"),
        &HumanModel::Copycat,
        1,
        400,
        &cfg,
        UtilityKind::Economic,
        3,
    )
    .unwrap();
    let r = &trace.records[0];
    assert_eq!(r.model_utility, r.collab_utility);
    assert!(r.final_loss <= r.initial_loss);
    assert_eq!(GeneratorParams::default().items, 18);
}

#[test]
fn proposition_suites() {
    for k in 0..1_000u64 {
        for side in [Side::Improvement, Side::Harm] {
            let ccf = random_side_ccf(side, (k % 5) as usize, k);
            let report = check_proposition(&ccf, side, 5, 0.01, k).unwrap();
            assert!(report.passed(), "{side:?} draw {k}: {:?}", report.counterexamples.first());
        }
    }
}

proptest! {
    #[test]
    fn improvement_paths_stabilize_in_time(seed in any::<u64>(), start in 0.0f64..=1.0, eps in 0.005f64..0.05) {
        let ccf = random_side_ccf(Side::Improvement, 4, seed);
        let bound = ((1.0 - start) / eps).ceil() as usize + 1;
        let path = simulate_clp(&ccf, start, bound, eps, LearnerMap::Perfect).unwrap();
        prop_assert!(path.stable_at.is_some());
        for w in path.steps.windows(2) {
            prop_assert!(w[1].model_utility >= w[0].model_utility);
        }
    }

    #[test]
    fn harm_paths_are_non_increasing(seed in any::<u64>(), start in 0.0f64..=1.0) {
        let ccf = random_side_ccf(Side::Harm, 4, seed);
        let path = simulate_clp(&ccf, start, 102, 0.01, LearnerMap::Perfect).unwrap();
        prop_assert!(path.stable_at.is_some());
        for w in path.steps.windows(2) {
            prop_assert!(w[1].model_utility <= w[0].model_utility);
        }
    }
}
