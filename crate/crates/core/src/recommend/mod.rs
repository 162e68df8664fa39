//! Recommenders: the deployed model `M_t`.
//!
//! Every recommender scores items, sorts by score and packs items in that
//! order until the first one that does not fit. The exception is the plain
//! density heuristic, which keeps scanning past items that do not fit.

mod calibrate;
pub mod features;
mod io;
pub mod mlp;
mod train;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::knapsack::{fill_in_order, KnapsackInstance, Solution, SolvedInstance, UtilityKind};
use crate::rng;
use crate::stats::MeanSd;

pub use calibrate::{calibrate_to_target, Calibration, CalibrationOptions, TREATMENT_TARGETS};
pub use features::Preprocessing;
pub use io::{read_recommender, write_recommender, RECOMMENDER_FORMAT};
pub use mlp::Mlp;
pub use train::{train_imitation, LabeledDataset, TrainedModel, TrainingConfig};

/// Anything that turns an instance into a feasible recommendation.
pub trait Recommend {
    fn recommend(&self, instance: &KnapsackInstance, seed: u64) -> Result<Solution>;
}

impl<F> Recommend for F
where
    F: Fn(&KnapsackInstance, u64) -> Result<Solution>,
{
    fn recommend(&self, instance: &KnapsackInstance, seed: u64) -> Result<Solution> {
        self(instance, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecommenderKind {
    /// Trained per-item scorer.
    Imitation(Mlp),
    GreedyDensity,
    /// Greedy solution indicator plus `sigma * N(0, 1)` per item.
    NoisyGreedy { sigma: f64 },
    /// Fixed per-item scores, independent of the instance.
    Constant { scores: Vec<f64> },
}

impl RecommenderKind {
    pub fn tag(&self) -> &'static str {
        match self {
            RecommenderKind::Imitation(_) => "imitation",
            RecommenderKind::GreedyDensity => "greedy_density",
            RecommenderKind::NoisyGreedy { .. } => "noisy_greedy",
            RecommenderKind::Constant { .. } => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub label: String,
    pub kind: RecommenderKind,
    pub preprocessing: Preprocessing,
}

impl Recommender {
    pub fn new(label: impl Into<String>, kind: RecommenderKind) -> Self {
        Self {
            label: label.into(),
            kind,
            preprocessing: Preprocessing::default(),
        }
    }

    pub fn greedy(label: impl Into<String>) -> Self {
        Self::new(label, RecommenderKind::GreedyDensity)
    }

    pub fn noisy_greedy(label: impl Into<String>, sigma: f64) -> Self {
        Self::new(label, RecommenderKind::NoisyGreedy { sigma })
    }

    pub fn constant(label: impl Into<String>, scores: Vec<f64>) -> Self {
        Self::new(label, RecommenderKind::Constant { scores })
    }

    /// Flat parameter vector: network weights, the noise level, or the fixed scores.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.kind {
            RecommenderKind::Imitation(mlp) => {
                mlp.flat_parameters().into_iter().map(f64::from).collect()
            }
            RecommenderKind::GreedyDensity => Vec::new(),
            RecommenderKind::NoisyGreedy { sigma } => vec![*sigma],
            RecommenderKind::Constant { scores } => scores.clone(),
        }
    }

    /// Per-item scores in original item order.
    pub fn scores(&self, instance: &KnapsackInstance, seed: u64) -> Result<Vec<f64>> {
        let n = instance.item_count();
        match &self.kind {
            RecommenderKind::Imitation(mlp) => {
                let expected = features::feature_len(n);
                if mlp.input_len() != expected || mlp.output_len() != n {
                    return Err(Error::Shape {
                        expected: mlp.output_len(),
                        actual: n,
                    });
                }
                let enc = features::encode(instance, self.preprocessing);
                let out: Vec<f64> = mlp
                    .predict(&enc.features)
                    .into_iter()
                    .map(f64::from)
                    .collect();
                Ok(enc.unpermute(&out))
            }
            RecommenderKind::GreedyDensity => {
                let g = greedy_density(instance);
                Ok(indicator(&g))
            }
            RecommenderKind::NoisyGreedy { sigma } => {
                let g = greedy_density(instance);
                let mut rng = rng::seeded(seed);
                Ok(indicator(&g)
                    .into_iter()
                    .map(|s| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        s + sigma * z
                    })
                    .collect())
            }
            RecommenderKind::Constant { scores } => {
                if scores.len() != n {
                    return Err(Error::Shape {
                        expected: scores.len(),
                        actual: n,
                    });
                }
                Ok(scores.clone())
            }
        }
    }
}

impl Recommend for Recommender {
    fn recommend(&self, instance: &KnapsackInstance, seed: u64) -> Result<Solution> {
        if let RecommenderKind::GreedyDensity = self.kind {
            return Ok(greedy_density(instance));
        }
        let scores = self.scores(instance, seed)?;
        Ok(score_sort_fill(instance, &scores))
    }
}

fn indicator(s: &Solution) -> Vec<f64> {
    s.selection().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Sorts items by descending score (ties: lower index) and packs them until
/// the first item that would exceed the capacity.
pub fn score_sort_fill(instance: &KnapsackInstance, scores: &[f64]) -> Solution {
    let mut order: Vec<usize> = (0..instance.item_count()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut solution = Solution::empty(instance);
    let cap = u64::from(instance.capacity());
    for i in order {
        if solution.total_weight() + u64::from(instance.weights()[i]) > cap {
            break;
        }
        solution.toggle(instance, i);
    }
    solution
}

/// Items by descending value/weight (ties: lower index), each added if it still fits.
pub fn greedy_density(instance: &KnapsackInstance) -> Solution {
    fill_in_order(instance, features::density_order(instance))
}

/// Mean and SD of `kind` utility over `instances`; the `k`-th instance gets
/// seed `derive_seed(seed, k)`.
pub fn evaluate_recommender<R: Recommend + ?Sized>(
    rec: &R,
    instances: &[SolvedInstance],
    kind: UtilityKind,
    seed: u64,
) -> Result<MeanSd> {
    let utilities = recommendation_utilities(rec, instances, kind, seed)?;
    MeanSd::of(&utilities).ok_or_else(|| Error::Data("no instances to evaluate".into()))
}

pub fn recommendation_utilities<R: Recommend + ?Sized>(
    rec: &R,
    instances: &[SolvedInstance],
    kind: UtilityKind,
    seed: u64,
) -> Result<Vec<f64>> {
    instances
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let s = rec.recommend(&x.instance, rng::derive_seed(seed, k as u64))?;
            x.utility(kind, &s)
        })
        .collect()
}
