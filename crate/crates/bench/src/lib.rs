//! Fixtures shared by the benchmarks.

use collab_core::knapsack::{GeneratorParams, KnapsackInstance, Solution, SolvedInstance};
use collab_core::recommend::LabeledDataset;

pub fn instances(count: usize, seed: u64) -> Vec<KnapsackInstance> {
    GeneratorParams::default()
        .generate_batch(count, seed)
        .expect("default generator parameters are valid")
}

pub fn solved(count: usize, seed: u64) -> Vec<SolvedInstance> {
    SolvedInstance::solve_all(instances(count, seed)).expect("generated instances solve")
}

/// Optimal-label training set.
pub fn optimal_dataset(count: usize, seed: u64) -> LabeledDataset {
    let pairs: Vec<(KnapsackInstance, Solution)> = solved(count, seed)
        .into_iter()
        .map(|s| {
            let y = collab_core::knapsack::solve_exact(&s.instance).expect("solvable");
            (s.instance, y)
        })
        .collect();
    LabeledDataset::new(pairs, 0).expect("optimal labels are feasible")
}
