use collab_core::knapsack::{
    generate_instance, read_instances, solve_bruteforce, solve_exact, utility, write_instances,
    GeneratorParams, KnapsackInstance, Solution, UtilityKind,
};
use collab_core::recommend::{evaluate_recommender, Recommend, Recommender};
use collab_core::SolvedInstance;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = KnapsackInstance> {
    (1usize..=14, 1u32..=60, 0u32..=200, any::<u64>())
        .prop_map(|(n, lo, span, seed)| generate_instance(n, lo, lo + span, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn exact_matches_bruteforce(x in instance()) {
        let dp = solve_exact(&x).unwrap();
        let bf = solve_bruteforce(&x).unwrap();
        prop_assert_eq!(dp.total_value(), bf.total_value());
        prop_assert_eq!(dp, bf, "same tie-break");
    }

    #[test]
    fn generated_instances_are_valid(n in 1usize..40, lo in 1u32..300, span in 0u32..300, seed in any::<u64>()) {
        let x = generate_instance(n, lo, lo + span, seed).unwrap();
        prop_assert_eq!(x.item_count(), n);
        prop_assert!((lo..=lo + span).contains(&x.capacity()));
        for (&w, &v) in x.weights().iter().zip(x.values()) {
            prop_assert!(w >= 1 && w <= x.capacity());
            prop_assert!(v >= 1);
            prop_assert!(i64::from(v) <= i64::from(w) + i64::from(x.capacity() / 10));
        }
    }

    #[test]
    fn utilities_are_bounded_and_consistent(x in instance(), bits in prop::collection::vec(any::<bool>(), 14)) {
        let mut s = Solution::empty(&x);
        for (i, &b) in bits.iter().take(x.item_count()).enumerate() {
            if b && s.total_weight() + u64::from(x.weights()[i]) <= u64::from(x.capacity()) {
                s.toggle(&x, i);
            }
        }
        let econ = utility(UtilityKind::Economic, &x, &s).unwrap();
        let opt = utility(UtilityKind::Optimality, &x, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&econ));
        prop_assert!(opt == 0.0 || opt == 1.0);
        prop_assert_eq!(econ == 1.0, opt == 1.0);
    }

    #[test]
    fn adding_a_fitting_item_never_lowers_utility(x in instance(), seed in any::<u64>()) {
        let mut s = collab_core::random_fill(&x, seed);
        let before = utility(UtilityKind::Economic, &x, &s).unwrap();
        if let Some(i) = (0..x.item_count()).find(|&i| {
            !s.is_selected(i) && s.total_weight() + u64::from(x.weights()[i]) <= u64::from(x.capacity())
        }) {
            s.toggle(&x, i);
            prop_assert!(utility(UtilityKind::Economic, &x, &s).unwrap() >= before);
        }
    }

    #[test]
    fn instance_file_round_trip(xs in prop::collection::vec(instance(), 0..20)) {
        let mut buf = Vec::new();
        write_instances(&mut buf, &xs).unwrap();
        prop_assert_eq!(read_instances(buf.as_slice()).unwrap(), xs);
    }
}

#[test]
fn exact_matches_bruteforce_at_full_scale() {
    for x in GeneratorParams::default().generate_batch(500, 31).unwrap() {
        assert_eq!(
            solve_exact(&x).unwrap().total_value(),
            solve_bruteforce(&x).unwrap().total_value()
        );
    }
}

#[test]
fn ten_thousand_generated_instances_satisfy_invariants() {
    for x in GeneratorParams::default().generate_batch(10_000, 5).unwrap() {
        assert_eq!(x.item_count(), 18);
        assert!((5..=250).contains(&x.capacity()));
        assert!(x.weights().iter().all(|&w| (1..=x.capacity()).contains(&w)));
        assert!(x.values().iter().all(|&v| v >= 1));
    }
}

#[test]
fn recommendations_are_always_feasible() {
    let recs = [
        Recommender::greedy("g"),
        Recommender::noisy_greedy("n", 0.3),
        Recommender::noisy_greedy("wild", 50.0),
        Recommender::constant("c", (0..18).map(f64::from).collect()),
    ];
    for (k, x) in GeneratorParams::default().generate_batch(10_000, 6).unwrap().iter().enumerate() {
        let s = recs[k % recs.len()].recommend(x, k as u64).unwrap();
        assert!(s.is_feasible(x));
    }
}

#[test]
fn greedy_density_regression_baseline() {
    let xs = SolvedInstance::solve_all(GeneratorParams::default().generate_batch(2000, 2024).unwrap()).unwrap();
    let m = evaluate_recommender(&Recommender::greedy("g"), &xs, UtilityKind::Economic, 0).unwrap();
    assert!((m.mean - 0.9536).abs() <= 0.01, "{}", m.mean);
}
