//! Synthetic human decision functions `H(X, Y_M)`.
//!
//! None of these model cognition. Search-based humans run a budgeted
//! first-improvement local search over single add, single drop and 1-for-1
//! swap moves, visiting moves in a seeded random order. The budget counts
//! evaluated moves.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knapsack::{KnapsackInstance, Solution, SolvedInstance, UtilityKind};
use crate::recommend::Recommend;
use crate::rng;
use crate::stats::MeanSd;

pub const DEFAULT_SEARCH_BUDGET: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HumanModel {
    /// Ignores the recommendation and searches from the empty knapsack.
    Independent {
        #[serde(default = "default_budget")]
        budget: usize,
    },
    /// Submits the recommendation unchanged.
    Copycat,
    /// Solves independently, then submits the better of its own solution and
    /// the recommendation (the recommendation on ties).
    BestOfTwo {
        #[serde(default = "default_budget")]
        budget: usize,
    },
    /// Starts from the recommendation and improves it.
    AnchoredSearch {
        #[serde(default = "default_budget")]
        budget: usize,
    },
    /// Follows the recommendation with probability `p(u)` interpolated from
    /// `(utility, probability)` knots, otherwise acts independently.
    ProbabilisticFollower {
        #[serde(default = "default_follow_knots")]
        knots: Vec<(f64, f64)>,
        #[serde(default = "default_budget")]
        budget: usize,
    },
    /// Adds a delta drawn from a logged table to the recommendation's
    /// economic utility and returns a solution realizing that utility.
    EmpiricalTabular {
        deltas: Vec<f64>,
        #[serde(default = "default_budget")]
        budget: usize,
    },
}

fn default_budget() -> usize {
    DEFAULT_SEARCH_BUDGET
}

/// Follow rate rising with recommendation quality. Configuration, not a measured curve.
pub fn default_follow_knots() -> Vec<(f64, f64)> {
    vec![(0.6, 0.1), (1.0, 0.9)]
}

impl HumanModel {
    pub fn name(&self) -> &'static str {
        match self {
            HumanModel::Independent { .. } => "independent",
            HumanModel::Copycat => "copycat",
            HumanModel::BestOfTwo { .. } => "best_of_two",
            HumanModel::AnchoredSearch { .. } => "anchored_search",
            HumanModel::ProbabilisticFollower { .. } => "probabilistic_follower",
            HumanModel::EmpiricalTabular { .. } => "empirical_tabular",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HumanModel::ProbabilisticFollower { knots, .. } => {
                if knots.is_empty() {
                    return Err(Error::Parameter("follow curve needs at least one knot".into()));
                }
                if knots
                    .iter()
                    .any(|&(u, p)| !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&p))
                {
                    return Err(Error::Parameter("follow knots must lie in [0,1]x[0,1]".into()));
                }
                if knots.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::Parameter(
                        "follow knots must be strictly sorted by utility".into(),
                    ));
                }
                Ok(())
            }
            HumanModel::EmpiricalTabular { deltas, .. } => {
                if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite() || d.abs() > 1.0) {
                    return Err(Error::Parameter(
                        "delta table must be non-empty with entries in [-1, 1]".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let model: HumanModel =
            toml::from_str(text).map_err(|e| Error::Parse(format!("human config: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("human config: {e}")))
    }

    /// Loads a config file. An `empirical_tabular` config may name a delta
    /// table CSV (`deltas_file`, relative to the config) and the `arm` to take
    /// from it instead of listing `deltas` inline.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("human config: {e}")))?;
        if let Some(file) = table.remove("deltas_file") {
            let file = file
                .as_str()
                .ok_or_else(|| Error::Parse("deltas_file must be a string".into()))?;
            let arm = table
                .remove("arm")
                .and_then(|a| a.as_str().map(str::to_owned))
                .ok_or_else(|| Error::Parse("deltas_file requires an arm".into()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let deltas = crate::analysis::read_delta_table(&base.join(file), &arm)?;
            table.insert(
                "deltas".into(),
                toml::Value::Array(deltas.into_iter().map(toml::Value::Float).collect()),
            );
        }
        let model: HumanModel = table
            .try_into()
            .map_err(|e| Error::Parse(format!("human config: {e}")))?;
        model.validate()?;
        Ok(model)
    }
}

/// Piecewise-linear interpolation of `(x, y)` knots, clamped outside their range.
pub(crate) fn interpolate_clamped(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let k = knots.partition_point(|&(kx, _)| kx <= x);
    let (x0, y0) = knots[k - 1];
    let (x1, y1) = knots[k];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

pub fn apply_human(
    model: &HumanModel,
    solved: &SolvedInstance,
    recommendation: &Solution,
    seed: u64,
) -> Result<Solution> {
    let instance = &solved.instance;
    recommendation.ensure_feasible(instance)?;
    let out = match model {
        HumanModel::Copycat => recommendation.clone(),
        HumanModel::Independent { budget } => independent(instance, *budget, seed),
        HumanModel::AnchoredSearch { budget } => {
            local_search(instance, recommendation.clone(), *budget, None, seed)
        }
        HumanModel::BestOfTwo { budget } => {
            let own = independent(instance, *budget, seed);
            if own.total_value() > recommendation.total_value() {
                own
            } else {
                recommendation.clone()
            }
        }
        HumanModel::ProbabilisticFollower { knots, budget } => {
            let u = solved.utility(UtilityKind::Economic, recommendation)?;
            let p = interpolate_clamped(knots, u).clamp(0.0, 1.0);
            let mut coin = rng::seeded(rng::derive_seed(seed, 0xF011));
            if coin.random_bool(p) {
                recommendation.clone()
            } else {
                independent(instance, *budget, seed)
            }
        }
        HumanModel::EmpiricalTabular { deltas, budget } => {
            let mut r = rng::seeded(rng::derive_seed(seed, 0x7AB1E));
            let delta = deltas[r.random_range(0..deltas.len())];
            let u = solved.utility(UtilityKind::Economic, recommendation)?;
            let mut target = (u + delta).clamp(0.0, 1.0) * solved.optimum as f64;
            if (target - target.round()).abs() < 1e-9 {
                target = target.round();
            }
            realize_target(instance, recommendation, target, *budget, seed)
        }
    };
    debug_assert!(out.is_feasible(instance));
    Ok(out)
}

fn independent(instance: &KnapsackInstance, budget: usize, seed: u64) -> Solution {
    local_search(instance, Solution::empty(instance), budget, None, seed)
}

#[derive(Debug, Clone, Copy)]
enum Move {
    Add(usize),
    Drop(usize),
    Swap { out: usize, into: usize },
}

/// Budgeted first-improvement local search. With `stop_at = Some(v)` the search
/// returns as soon as the total value reaches `v`.
pub fn local_search(
    instance: &KnapsackInstance,
    start: Solution,
    budget: usize,
    stop_at: Option<f64>,
    seed: u64,
) -> Solution {
    let mut rng = rng::seeded(seed);
    let mut current = start;
    let cap = i64::from(instance.capacity());
    let (w, v) = (instance.weights(), instance.values());
    let mut remaining = budget;
    let mut moves = Vec::new();
    let reached = |s: &Solution| stop_at.is_some_and(|t| s.total_value() as f64 >= t);
    'outer: while remaining > 0 && !reached(&current) {
        moves.clear();
        let selected = current.selected_indices();
        let unselected: Vec<usize> = (0..instance.item_count())
            .filter(|&i| !current.is_selected(i))
            .collect();
        moves.extend(unselected.iter().map(|&i| Move::Add(i)));
        moves.extend(selected.iter().map(|&i| Move::Drop(i)));
        for &out in &selected {
            moves.extend(unselected.iter().map(|&into| Move::Swap { out, into }));
        }
        moves.shuffle(&mut rng);
        let load = current.total_weight() as i64;
        for &m in &moves {
            if remaining == 0 {
                break 'outer;
            }
            remaining -= 1;
            let (dw, dv) = match m {
                Move::Add(i) => (i64::from(w[i]), i64::from(v[i])),
                Move::Drop(i) => (-i64::from(w[i]), -i64::from(v[i])),
                Move::Swap { out, into } => (
                    i64::from(w[into]) - i64::from(w[out]),
                    i64::from(v[into]) - i64::from(v[out]),
                ),
            };
            if dv > 0 && load + dw <= cap {
                match m {
                    Move::Add(i) | Move::Drop(i) => current.toggle(instance, i),
                    Move::Swap { out, into } => {
                        current.toggle(instance, out);
                        current.toggle(instance, into);
                    }
                }
                continue 'outer;
            }
        }
        break; // local optimum
    }
    current
}

/// Feasible solution whose value is nearest to `target` (ties: the higher
/// value). Improvements are first sought by local search from the
/// recommendation; the value DP covers targets the search misses.
fn realize_target(
    instance: &KnapsackInstance,
    recommendation: &Solution,
    target: f64,
    budget: usize,
    seed: u64,
) -> Solution {
    let mut candidates = vec![recommendation.clone()];
    if target > recommendation.total_value() as f64 {
        candidates.push(local_search(instance, recommendation.clone(), budget, Some(target), seed));
    }
    candidates.extend(closest_value_solution(instance, target, true));
    candidates.extend(closest_value_solution(instance, target, false));
    let gap = |s: &Solution| (s.total_value() as f64 - target).abs();
    candidates
        .into_iter()
        .min_by(|a, b| gap(a).total_cmp(&gap(b)).then(b.total_value().cmp(&a.total_value())))
        .expect("the recommendation is a candidate")
}

/// Min-weight subset-by-value DP: the feasible solution with the smallest
/// value `>= target` (`above`) or the largest value `<= target`.
fn closest_value_solution(instance: &KnapsackInstance, target: f64, above: bool) -> Option<Solution> {
    let n = instance.item_count();
    let total = instance.total_value() as usize;
    let width = total + 1;
    let (w, v) = (instance.weights(), instance.values());
    const INF: u64 = u64::MAX;
    // min_w[i * width + val]: min weight of a subset of items i.. with value exactly val.
    let mut min_w = vec![INF; (n + 1) * width];
    min_w[n * width] = 0;
    for i in (0..n).rev() {
        let (head, tail) = min_w.split_at_mut((i + 1) * width);
        let row = &mut head[i * width..];
        let next = &tail[..width];
        let (wi, vi) = (u64::from(w[i]), v[i] as usize);
        for val in 0..width {
            let skip = next[val];
            let take = if val >= vi && next[val - vi] != INF {
                next[val - vi] + wi
            } else {
                INF
            };
            row[val] = skip.min(take);
        }
    }
    let cap = u64::from(instance.capacity());
    let feasible = |val: usize| min_w[val] <= cap;
    let chosen = if above {
        (0..width).find(|&val| val as f64 >= target && feasible(val))?
    } else {
        (0..width).rev().find(|&val| val as f64 <= target && feasible(val))?
    };
    let mut selection = vec![false; n];
    let mut val = chosen;
    for i in 0..n {
        let vi = v[i] as usize;
        let rest = min_w[i * width + val];
        if val >= vi && min_w[(i + 1) * width + val - vi] != INF
            && min_w[(i + 1) * width + val - vi] + u64::from(w[i]) == rest
        {
            selection[i] = true;
            val -= vi;
        }
    }
    Solution::from_selection(instance, selection).ok()
}

/// Mean of `U(H(X, Y_M)) − U(Y_M)` over `instances` and its plain standard error.
pub fn measure_delta<R: Recommend + ?Sized>(
    model: &HumanModel,
    recommender: &R,
    instances: &[SolvedInstance],
    kind: UtilityKind,
    seed: u64,
) -> Result<MeanSd> {
    let deltas = instances
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let k = k as u64;
            let rec = recommender.recommend(&x.instance, rng::derive_seed(seed, 2 * k))?;
            let out = apply_human(model, x, &rec, rng::derive_seed(seed, 2 * k + 1))?;
            Ok(x.utility(kind, &out)? - x.utility(kind, &rec)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    MeanSd::of(&deltas).ok_or_else(|| Error::Data("no instances to measure".into()))
}
