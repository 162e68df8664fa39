//! 0-1 knapsack instances, solvers and utilities.
//!
//! Instances are integer-valued and small (the experiment uses 18 items and
//! capacities in `[5, 250]`), so the exact solver is a dense weight-indexed
//! dynamic program and brute force is available as a test oracle.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest capacity the dense DP will accept by default.
pub const DEFAULT_MAX_CAPACITY: u32 = 1_000_000;

/// Largest item count brute force will enumerate.
pub const BRUTE_FORCE_MAX_ITEMS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "InstanceData")]
pub struct KnapsackInstance {
    weights: Vec<u32>,
    values: Vec<u32>,
    capacity: u32,
    /// Generator seed the instance came from (provenance only).
    seed: u64,
}

#[derive(Deserialize)]
struct InstanceData {
    weights: Vec<u32>,
    values: Vec<u32>,
    capacity: u32,
    seed: u64,
}

impl TryFrom<InstanceData> for KnapsackInstance {
    type Error = Error;
    fn try_from(d: InstanceData) -> Result<Self> {
        Self::new(d.weights, d.values, d.capacity, d.seed)
    }
}

impl KnapsackInstance {
    pub fn new(weights: Vec<u32>, values: Vec<u32>, capacity: u32, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Parameter("instance needs at least one item".into()));
        }
        if weights.len() != values.len() {
            return Err(Error::Parameter(format!(
                "{} weights but {} values",
                weights.len(),
                values.len()
            )));
        }
        if capacity == 0 {
            return Err(Error::Parameter("capacity must be positive".into()));
        }
        if let Some(w) = weights.iter().find(|&&w| w == 0 || w > capacity) {
            return Err(Error::Parameter(format!(
                "weight {w} outside [1, {capacity}]"
            )));
        }
        if values.contains(&0) {
            return Err(Error::Parameter("values must be at least 1".into()));
        }
        Ok(Self {
            weights,
            values,
            capacity,
            seed,
        })
    }

    pub fn item_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.iter().map(|&w| u64::from(w)).sum()
    }

    pub fn total_value(&self) -> u64 {
        self.values.iter().map(|&v| u64::from(v)).sum()
    }
}

/// Parameters of the hard-instance generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub items: usize,
    pub w_min: u32,
    pub w_max: u32,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            items: 18,
            w_min: 5,
            w_max: 250,
        }
    }
}

impl GeneratorParams {
    pub fn generate(&self, seed: u64) -> Result<KnapsackInstance> {
        generate_instance(self.items, self.w_min, self.w_max, seed)
    }

    /// `count` instances whose seeds are derived from `seed`.
    pub fn generate_batch(&self, count: usize, seed: u64) -> Result<Vec<KnapsackInstance>> {
        (0..count as u64)
            .map(|k| self.generate(rng::derive_seed(seed, k)))
            .collect()
    }
}

/// Strongly correlated instance: capacity uniform in `[w_min, w_max]`, weights
/// uniform in `[1, W]`, each value uniform within `⌊W/10⌋` of its weight and
/// floored at 1.
pub fn generate_instance(n: usize, w_min: u32, w_max: u32, seed: u64) -> Result<KnapsackInstance> {
    if n == 0 {
        return Err(Error::Parameter("item count must be at least 1".into()));
    }
    if w_min == 0 || w_min > w_max {
        return Err(Error::Parameter(format!(
            "capacity bounds must satisfy 1 <= w_min <= w_max, got [{w_min}, {w_max}]"
        )));
    }
    let mut rng = rng::seeded(seed);
    let capacity = rng.random_range(w_min..=w_max);
    let weights: Vec<u32> = (0..n).map(|_| rng.random_range(1..=capacity)).collect();
    let spread = i64::from(capacity / 10);
    let values = weights
        .iter()
        .map(|&w| {
            let w = i64::from(w);
            let v = rng.random_range(w - spread..=w + spread);
            v.max(1) as u32
        })
        .collect();
    KnapsackInstance::new(weights, values, capacity, seed)
}

/// Pearson correlation between item weights and values.
pub fn weight_value_correlation(instance: &KnapsackInstance) -> Result<f64> {
    let n = instance.item_count();
    if n < 2 {
        return Err(Error::DegenerateInput(
            "correlation needs at least two items".into(),
        ));
    }
    let xs: Vec<f64> = instance.weights.iter().map(|&w| f64::from(w)).collect();
    let ys: Vec<f64> = instance.values.iter().map(|&v| f64::from(v)).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput(
            "weights or values have zero variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// An item selection together with its sums.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Solution {
    selection: Vec<bool>,
    total_weight: u64,
    total_value: u64,
}

impl Solution {
    pub fn from_selection(instance: &KnapsackInstance, selection: Vec<bool>) -> Result<Self> {
        if selection.len() != instance.item_count() {
            return Err(Error::Shape {
                expected: instance.item_count(),
                actual: selection.len(),
            });
        }
        let (mut total_weight, mut total_value) = (0u64, 0u64);
        for (i, _) in selection.iter().enumerate().filter(|(_, &s)| s) {
            total_weight += u64::from(instance.weights[i]);
            total_value += u64::from(instance.values[i]);
        }
        Ok(Self {
            selection,
            total_weight,
            total_value,
        })
    }

    pub fn from_indices(instance: &KnapsackInstance, indices: &[usize]) -> Result<Self> {
        let mut selection = vec![false; instance.item_count()];
        for &i in indices {
            if i >= selection.len() {
                return Err(Error::Shape {
                    expected: instance.item_count(),
                    actual: i + 1,
                });
            }
            selection[i] = true;
        }
        Self::from_selection(instance, selection)
    }

    pub fn empty(instance: &KnapsackInstance) -> Self {
        Self {
            selection: vec![false; instance.item_count()],
            total_weight: 0,
            total_value: 0,
        }
    }

    pub fn selection(&self) -> &[bool] {
        &self.selection
    }

    pub fn into_selection(self) -> Vec<bool> {
        self.selection
    }

    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    pub fn total_value(&self) -> u64 {
        self.total_value
    }

    pub fn len(&self) -> usize {
        self.selection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selection.is_empty()
    }

    pub fn is_selected(&self, item: usize) -> bool {
        self.selection[item]
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selection
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn is_feasible(&self, instance: &KnapsackInstance) -> bool {
        self.selection.len() == instance.item_count()
            && self.total_weight <= u64::from(instance.capacity)
    }

    pub fn ensure_feasible(&self, instance: &KnapsackInstance) -> Result<()> {
        if self.selection.len() != instance.item_count() {
            return Err(Error::Shape {
                expected: instance.item_count(),
                actual: self.selection.len(),
            });
        }
        if self.total_weight > u64::from(instance.capacity) {
            return Err(Error::Infeasible {
                weight: self.total_weight,
                capacity: u64::from(instance.capacity),
            });
        }
        Ok(())
    }

    /// Toggles `item` in place, keeping the sums consistent.
    pub fn toggle(&mut self, instance: &KnapsackInstance, item: usize) {
        let (w, v) = (
            u64::from(instance.weights[item]),
            u64::from(instance.values[item]),
        );
        if self.selection[item] {
            self.total_weight -= w;
            self.total_value -= v;
        } else {
            self.total_weight += w;
            self.total_value += v;
        }
        self.selection[item] = !self.selection[item];
    }

    /// Compact `0`/`1` string, one character per item.
    pub fn to_bitstring(&self) -> String {
        self.selection
            .iter()
            .map(|&s| if s { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bitstring(instance: &KnapsackInstance, bits: &str) -> Result<Self> {
        let selection = parse_bits(bits)?;
        Self::from_selection(instance, selection)
    }
}

pub(crate) fn parse_bits(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Parse(format!("invalid selection bit {other:?}"))),
        })
        .collect()
}

/// Exact optimum by dynamic programming over capacities.
///
/// Among equal-value optima the selection whose sorted index list is
/// lexicographically smallest is returned.
pub fn solve_exact(instance: &KnapsackInstance) -> Result<Solution> {
    solve_exact_capped(instance, DEFAULT_MAX_CAPACITY)
}

pub fn solve_exact_capped(instance: &KnapsackInstance, max_capacity: u32) -> Result<Solution> {
    if instance.capacity > max_capacity {
        return Err(Error::Size(format!(
            "capacity {} exceeds DP cap {max_capacity}",
            instance.capacity
        )));
    }
    let n = instance.item_count();
    let cap = instance.capacity as usize;
    let width = cap + 1;
    // best[i * width + c]: max value using items i.. with capacity c.
    let mut best = vec![0u64; (n + 1) * width];
    for i in (0..n).rev() {
        let w = instance.weights[i] as usize;
        let v = u64::from(instance.values[i]);
        let (head, tail) = best.split_at_mut((i + 1) * width);
        let row = &mut head[i * width..];
        let next = &tail[..width];
        for c in 0..width {
            let skip = next[c];
            row[c] = if w <= c { skip.max(next[c - w] + v) } else { skip };
        }
    }
    // Taking the earliest item that is still consistent with an optimum yields
    // the index-lexicographically smallest optimal set.
    let mut selection = vec![false; n];
    let mut c = cap;
    for i in 0..n {
        let w = instance.weights[i] as usize;
        let v = u64::from(instance.values[i]);
        if w <= c && best[(i + 1) * width + c - w] + v == best[i * width + c] {
            selection[i] = true;
            c -= w;
        }
    }
    let solution = Solution::from_selection(instance, selection)?;
    debug_assert_eq!(solution.total_value, best[cap]);
    Ok(solution)
}

/// Exhaustive enumeration over all `2^n` subsets, with the same tie-break as
/// [`solve_exact`].
pub fn solve_bruteforce(instance: &KnapsackInstance) -> Result<Solution> {
    let n = instance.item_count();
    if n > BRUTE_FORCE_MAX_ITEMS {
        return Err(Error::Size(format!(
            "brute force limited to {BRUTE_FORCE_MAX_ITEMS} items, got {n}"
        )));
    }
    let cap = u64::from(instance.capacity);
    // Subset sums built from the subset without its lowest item.
    let size = 1usize << n;
    let mut weight = vec![0u64; size];
    let mut value = vec![0u64; size];
    let mut best_mask = 0u32;
    let mut best_value = 0u64;
    for mask in 1..size {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        weight[mask] = weight[rest] + u64::from(instance.weights[low]);
        value[mask] = value[rest] + u64::from(instance.values[low]);
        let (w, v, m) = (weight[mask], value[mask], mask as u32);
        if w > cap {
            continue;
        }
        if v > best_value || (v == best_value && index_lex_less(m, best_mask, n)) {
            best_value = v;
            best_mask = m;
        }
    }
    let selection = (0..n).map(|i| best_mask & (1 << i) != 0).collect();
    Solution::from_selection(instance, selection)
}

fn index_lex_less(a: u32, b: u32, n: usize) -> bool {
    let ia = (0..n).filter(|i| a & (1 << i) != 0);
    let ib = (0..n).filter(|i| b & (1 << i) != 0);
    ia.lt(ib)
}

pub fn optimal_value(instance: &KnapsackInstance) -> Result<u64> {
    Ok(solve_exact(instance)?.total_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    /// Achieved value over optimal value.
    Economic,
    /// 1 when the optimal value is achieved, 0 otherwise.
    Optimality,
}

impl UtilityKind {
    pub const ALL: [UtilityKind; 2] = [UtilityKind::Economic, UtilityKind::Optimality];

    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::Economic => "economic",
            UtilityKind::Optimality => "optimality",
        }
    }
}

impl FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "economic" | "econ" => Ok(UtilityKind::Economic),
            "optimality" | "opt" => Ok(UtilityKind::Optimality),
            other => Err(Error::Parse(format!("unknown utility kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn utility(kind: UtilityKind, instance: &KnapsackInstance, solution: &Solution) -> Result<f64> {
    solution.ensure_feasible(instance)?;
    Ok(utility_given_optimum(
        kind,
        solution.total_value,
        optimal_value(instance)?,
    ))
}

/// Utility of a feasible solution with value `value` when the optimum is `optimum`.
pub fn utility_given_optimum(kind: UtilityKind, value: u64, optimum: u64) -> f64 {
    debug_assert!(value <= optimum);
    match kind {
        UtilityKind::Economic => value as f64 / optimum as f64,
        UtilityKind::Optimality => {
            if value == optimum {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// An instance paired with its optimal value, for repeated utility evaluation.
#[derive(Debug, Clone)]
pub struct SolvedInstance {
    pub instance: KnapsackInstance,
    pub optimum: u64,
}

impl SolvedInstance {
    pub fn new(instance: KnapsackInstance) -> Result<Self> {
        let optimum = optimal_value(&instance)?;
        Ok(Self { instance, optimum })
    }

    pub fn utility(&self, kind: UtilityKind, solution: &Solution) -> Result<f64> {
        solution.ensure_feasible(&self.instance)?;
        Ok(utility_given_optimum(kind, solution.total_value, self.optimum))
    }

    pub fn solve_all(instances: Vec<KnapsackInstance>) -> Result<Vec<Self>> {
        instances.into_iter().map(Self::new).collect()
    }
}

/// Visits items in a seeded uniformly random order and packs them until the
/// first item that would exceed the capacity.
pub fn random_fill(instance: &KnapsackInstance, seed: u64) -> Solution {
    let mut order: Vec<usize> = (0..instance.item_count()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut solution = Solution::empty(instance);
    let cap = u64::from(instance.capacity);
    for i in order {
        if solution.total_weight + u64::from(instance.weights[i]) > cap {
            break;
        }
        solution.toggle(instance, i);
    }
    solution
}

/// Packs items in the given order, skipping any that no longer fit.
pub fn fill_in_order(instance: &KnapsackInstance, order: impl IntoIterator<Item = usize>) -> Solution {
    let mut solution = Solution::empty(instance);
    let cap = u64::from(instance.capacity);
    for i in order {
        if !solution.selection[i] && solution.total_weight + u64::from(instance.weights[i]) <= cap {
            solution.toggle(instance, i);
        }
    }
    solution
}

// Instance file format: one instance per line, five tab-separated fields
//   n  W  w_1,...,w_n  v_1,...,v_n  seed
// Blank lines and lines starting with '#' are ignored.

pub const INSTANCE_FILE_HEADER: &str = "# n\tcapacity\tweights\tvalues\tseed";

impl KnapsackInstance {
    pub fn to_line(&self) -> String {
        let mut line = format!("{}\t{}\t", self.item_count(), self.capacity);
        join_into(&mut line, &self.weights);
        line.push('\t');
        join_into(&mut line, &self.values);
        let _ = write!(line, "\t{}", self.seed);
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "expected 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let n: usize = parse_num(fields[0], "item count")?;
        let capacity: u32 = parse_num(fields[1], "capacity")?;
        let weights = parse_list(fields[2], "weight")?;
        let values = parse_list(fields[3], "value")?;
        let seed: u64 = parse_num(fields[4], "seed")?;
        if weights.len() != n || values.len() != n {
            return Err(Error::Parse(format!(
                "declared {n} items but found {} weights and {} values",
                weights.len(),
                values.len()
            )));
        }
        Self::new(weights, values, capacity, seed)
    }
}

fn join_into(out: &mut String, xs: &[u32]) {
    for (k, x) in xs.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x}");
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid {what}: {s:?}")))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<u32>> {
    s.split(',').map(|x| parse_num(x, what)).collect()
}

pub fn write_instances<W: Write>(mut out: W, instances: &[KnapsackInstance]) -> Result<()> {
    writeln!(out, "{INSTANCE_FILE_HEADER}")?;
    for inst in instances {
        writeln!(out, "{}", inst.to_line())?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(input: R) -> Result<Vec<KnapsackInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let inst = KnapsackInstance::parse_line(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(inst);
    }
    Ok(out)
}
