//! Collaborative characteristic functions, learning paths and the closed
//! deploy → label → retrain loop.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::human::{apply_human, interpolate_clamped, HumanModel};
use crate::knapsack::{GeneratorParams, SolvedInstance, UtilityKind};
use crate::recommend::{train_imitation, LabeledDataset, Recommend, Recommender, TrainingConfig};
use crate::rng;

/// Default minimum distinguishable utility change.
pub const DEFAULT_EPSILON_HAT: f64 = 0.01;

const EMPIRICAL_BUNDLE: &str = include_str!("../data/empirical_ccf.txt");
pub const CCF_FORMAT: &str = "# collab-ccf v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Taken from published summary statistics.
    Published,
    /// Estimated from a study log.
    Estimated,
    /// Measured on simulated humans.
    Synthetic,
    /// Supplied without a verifiable source.
    Unverified,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Published => "published",
            Provenance::Estimated => "estimated",
            Provenance::Synthetic => "synthetic",
            Provenance::Unverified => "unverified",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "published" => Ok(Provenance::Published),
            "estimated" => Ok(Provenance::Estimated),
            "synthetic" => Ok(Provenance::Synthetic),
            "unverified" => Ok(Provenance::Unverified),
            other => Err(Error::Parse(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcfPoint {
    pub model_utility: f64,
    pub collab_utility: f64,
    /// `collab_utility − model_utility`.
    pub delta: f64,
    pub se: f64,
    pub label: String,
    pub provenance: Provenance,
}

impl CcfPoint {
    pub fn new(
        model_utility: f64,
        collab_utility: f64,
        se: f64,
        label: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            model_utility,
            collab_utility,
            delta: collab_utility - model_utility,
            se,
            label: label.into(),
            provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    /// Outside the knots, return the nearest knot's value.
    #[default]
    Clamp,
}

/// Piecewise-linear CCF through at least two knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Ccf {
    points: Vec<CcfPoint>,
    knots: Vec<(f64, f64)>,
    pub extrapolation: Extrapolation,
}

impl Ccf {
    /// Sorts the points by model utility; coordinates must be distinct and lie in [0, 1].
    pub fn new(mut points: Vec<CcfPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Parameter("a CCF needs at least two points".into()));
        }
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if let Some(p) = points
            .iter()
            .find(|p| !unit(p.model_utility) || !unit(p.collab_utility))
        {
            return Err(Error::Parameter(format!(
                "CCF point ({}, {}) outside [0,1]",
                p.model_utility, p.collab_utility
            )));
        }
        points.sort_by(|a, b| a.model_utility.total_cmp(&b.model_utility));
        if points
            .windows(2)
            .any(|w| w[0].model_utility >= w[1].model_utility)
        {
            return Err(Error::Parameter("CCF model utilities must be distinct".into()));
        }
        let knots = points
            .iter()
            .map(|p| (p.model_utility, p.collab_utility))
            .collect();
        Ok(Self {
            points,
            knots,
            extrapolation: Extrapolation::Clamp,
        })
    }

    pub fn from_knots(knots: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            knots
                .iter()
                .enumerate()
                .map(|(k, &(m, c))| CcfPoint::new(m, c, 0.0, format!("k{k}"), Provenance::Synthetic))
                .collect(),
        )
    }

    pub fn identity() -> Self {
        Self::from_knots(&[(0.0, 0.0), (1.0, 1.0)]).expect("valid knots")
    }

    /// The bundled two-knot CCF anchored on the q1 and q6 study arms.
    pub fn empirical() -> Self {
        Self::parse(EMPIRICAL_BUNDLE).expect("bundled CCF parses")
    }

    pub fn points(&self) -> &[CcfPoint] {
        &self.points
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, u: f64) -> f64 {
        interpolate_clamped(&self.knots, u)
    }

    /// Text bundle: one knot per line,
    /// `model_utility collab_utility se label provenance`; `#` starts a comment.
    /// A missing provenance column reads as `unverified`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if !(4..=5).contains(&f.len()) {
                return Err(Error::Parse(format!(
                    "CCF line {}: expected 4 or 5 fields, found {}",
                    no + 1,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Parse(format!("CCF line {}: bad number {s:?}", no + 1)))
            };
            let provenance = match f.get(4) {
                Some(p) => p.parse()?,
                None => Provenance::Unverified,
            };
            points.push(CcfPoint::new(num(f[0])?, num(f[1])?, num(f[2])?, f[3], provenance));
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        points_to_text(&self.points)
    }

    /// Downgrades `published` provenance on intermediate arms (q2 to q5), whose
    /// published values are only available graphically, and returns a warning
    /// for each.
    pub fn mark_unverified_arms(&mut self) -> Vec<String> {
        let mut warnings = Vec::new();
        for p in &mut self.points {
            if matches!(p.label.as_str(), "q2" | "q3" | "q4" | "q5") && p.provenance == Provenance::Published {
                p.provenance = Provenance::Unverified;
                warnings.push(format!(
                    "knot {} ({}, {}) has no published numeric source; marked unverified",
                    p.label, p.model_utility, p.collab_utility
                ));
            }
        }
        warnings
    }
}

/// Maps last epoch's collaborative utility to next epoch's model utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerMap {
    Perfect,
    /// `clamp(slope * u + intercept, 0, 1)`.
    AffineTilt { slope: f64, intercept: f64 },
}

impl LearnerMap {
    pub fn slope(&self) -> f64 {
        match self {
            LearnerMap::Perfect => 1.0,
            LearnerMap::AffineTilt { slope, .. } => *slope,
        }
    }

    pub fn intercept(&self) -> f64 {
        match self {
            LearnerMap::Perfect => 0.0,
            LearnerMap::AffineTilt { intercept, .. } => *intercept,
        }
    }

    pub fn apply(&self, u: f64) -> f64 {
        match self {
            LearnerMap::Perfect => u,
            LearnerMap::AffineTilt { slope, intercept } => (slope * u + intercept).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub epoch: usize,
    pub model_utility: f64,
    pub collab_utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningPath {
    pub start_utility: f64,
    pub epsilon_hat: f64,
    pub steps: Vec<PathStep>,
    /// First epoch with `|collab − model| ≤ epsilon_hat`.
    pub stable_at: Option<usize>,
}

impl LearningPath {
    pub fn final_utility(&self) -> f64 {
        self.steps.last().map_or(self.start_utility, |s| s.collab_utility)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(PathRow {
                epoch: s.epoch,
                model_utility: s.model_utility,
                collab_utility: s.collab_utility,
                stable: self.stable_at.is_some_and(|t| s.epoch >= t),
                epsilon_hat: self.epsilon_hat,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut steps = Vec::new();
        let mut stable_at = None;
        let mut epsilon_hat = None;
        for row in csv::Reader::from_reader(input).deserialize::<PathRow>() {
            let row = row.map_err(csv_error)?;
            if row.epoch != steps.len() + 1 {
                return Err(Error::Parse(format!("path epoch {} out of order", row.epoch)));
            }
            if row.stable && stable_at.is_none() {
                stable_at = Some(row.epoch);
            }
            epsilon_hat.get_or_insert(row.epsilon_hat);
            steps.push(PathStep {
                epoch: row.epoch,
                model_utility: row.model_utility,
                collab_utility: row.collab_utility,
            });
        }
        let first = steps
            .first()
            .ok_or_else(|| Error::Parse("empty learning path".into()))?;
        Ok(Self {
            start_utility: first.model_utility,
            epsilon_hat: epsilon_hat.unwrap_or(DEFAULT_EPSILON_HAT),
            steps,
            stable_at,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PathRow {
    epoch: usize,
    model_utility: f64,
    collab_utility: f64,
    stable: bool,
    epsilon_hat: f64,
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Persistence(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}

/// Iterates `u_collab(t) = ccf(u_model(t))`, `u_model(t+1) = learner(u_collab(t))`
/// for `epochs` steps. Once stable, the remaining steps repeat the stable values.
pub fn simulate_clp(
    ccf: &Ccf,
    start: f64,
    epochs: usize,
    epsilon_hat: f64,
    learner: LearnerMap,
) -> Result<LearningPath> {
    if !(0.0..=1.0).contains(&start) {
        return Err(Error::Parameter(format!("start utility {start} outside [0,1]")));
    }
    if epochs == 0 {
        return Err(Error::Parameter("a learning path needs at least one epoch".into()));
    }
    if epsilon_hat.is_nan() || epsilon_hat <= 0.0 {
        return Err(Error::Parameter("epsilon_hat must be positive".into()));
    }
    let mut steps = Vec::with_capacity(epochs);
    let mut stable_at = None;
    let mut model = start;
    for epoch in 1..=epochs {
        let step = match (stable_at, steps.last()) {
            (Some(_), Some(&last)) => PathStep { epoch, ..last },
            _ => {
                let collab = ccf.eval(model);
                if (collab - model).abs() <= epsilon_hat {
                    stable_at = Some(epoch);
                }
                PathStep {
                    epoch,
                    model_utility: model,
                    collab_utility: collab,
                }
            }
        };
        model = learner.apply(step.collab_utility);
        steps.push(step);
    }
    Ok(LearningPath {
        start_utility: start,
        epsilon_hat,
        steps,
        stable_at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Attracting,
    Repelling,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub utility: f64,
    pub stability: Stability,
}

fn classify(slopes: &[f64]) -> Stability {
    const TOL: f64 = 1e-9;
    if slopes.iter().all(|s| s.abs() < 1.0 - TOL) {
        Stability::Attracting
    } else if slopes.iter().all(|s| s.abs() > 1.0 + TOL) {
        Stability::Repelling
    } else {
        Stability::Neutral
    }
}

/// Crossings of the CCF with the identity line on the grid {0, knots, 1}.
/// Stability is read off the CCF slope at the crossing: attracting when
/// `|slope| < 1`, repelling when `> 1`, neutral otherwise or when the two
/// sides of a knot disagree.
pub fn find_fixed_points(ccf: &Ccf, epsilon_hat: f64) -> Vec<FixedPoint> {
    const ZERO: f64 = 1e-12;
    let mut grid: Vec<f64> = std::iter::once(0.0)
        .chain(ccf.knots().iter().map(|k| k.0))
        .chain(std::iter::once(1.0))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let g = |u: f64| ccf.eval(u) - u;
    let slope = |a: f64, b: f64| (ccf.eval(b) - ccf.eval(a)) / (b - a);
    let mut out: Vec<FixedPoint> = Vec::new();
    for (k, &u) in grid.iter().enumerate() {
        if g(u).abs() <= ZERO {
            let mut slopes = Vec::new();
            if k > 0 {
                slopes.push(slope(grid[k - 1], u));
            }
            if k + 1 < grid.len() {
                slopes.push(slope(u, grid[k + 1]));
            }
            out.push(FixedPoint {
                utility: u,
                stability: classify(&slopes),
            });
        }
        if let Some(&next) = grid.get(k + 1) {
            let (ga, gb) = (g(u), g(next));
            if ga.abs() > ZERO && gb.abs() > ZERO && (ga < 0.0) != (gb < 0.0) {
                let (mut lo, mut hi) = (u, next);
                while hi - lo > 1e-15 {
                    let mid = 0.5 * (lo + hi);
                    if (g(mid) < 0.0) == (ga < 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                out.push(FixedPoint {
                    utility: 0.5 * (lo + hi),
                    stability: classify(&[slope(u, next)]),
                });
            }
        }
    }
    debug_assert!(out.iter().all(|p| g(p.utility).abs() <= epsilon_hat));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// The CCF lies on or above the identity line.
    Improvement,
    /// The CCF lies on or below the identity line.
    Harm,
}

#[derive(Debug, Clone)]
pub struct PropositionReport {
    pub side: Side,
    pub trials: usize,
    pub max_epochs: usize,
    /// Paths that were not monotone in the expected direction or never stabilized.
    pub counterexamples: Vec<LearningPath>,
}

impl PropositionReport {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Checks that paths from `trials` random starts are monotone in the
/// direction of `side` and stabilize within `⌈1/epsilon_hat⌉ + 1` epochs.
pub fn check_proposition(
    ccf: &Ccf,
    side: Side,
    trials: usize,
    epsilon_hat: f64,
    seed: u64,
) -> Result<PropositionReport> {
    const TOL: f64 = 1e-12;
    let mut grid: Vec<f64> = (0..=100).map(|k| f64::from(k) / 100.0).collect();
    grid.extend(ccf.knots().iter().map(|k| k.0));
    let violating: Vec<f64> = grid
        .into_iter()
        .filter(|&u| {
            let d = ccf.eval(u) - u;
            match side {
                Side::Improvement => d < -TOL,
                Side::Harm => d > TOL,
            }
        })
        .collect();
    if !violating.is_empty() {
        return Err(Error::Precondition(format!(
            "CCF is not on the {side:?} side of the identity at u = {violating:?}"
        )));
    }
    let max_epochs = (1.0 / epsilon_hat).ceil() as usize + 1;
    let mut rng = rng::seeded(seed);
    let mut counterexamples = Vec::new();
    for _ in 0..trials {
        let start: f64 = rng.random_range(0.0..=1.0);
        let path = simulate_clp(ccf, start, max_epochs, epsilon_hat, LearnerMap::Perfect)?;
        let monotone = path.steps.windows(2).all(|w| {
            let (a, b) = (w[0].model_utility, w[1].model_utility);
            match side {
                Side::Improvement => b >= a - TOL,
                Side::Harm => b <= a + TOL,
            }
        });
        if !monotone || path.stable_at.is_none() {
            counterexamples.push(path);
        }
    }
    Ok(PropositionReport {
        side,
        trials,
        max_epochs,
        counterexamples,
    })
}

/// Random CCF with knots at 0 and 1 plus `interior` random knots, entirely on
/// the requested side of the identity and inside the unit square.
pub fn random_side_ccf(side: Side, interior: usize, seed: u64) -> Ccf {
    let mut rng = rng::seeded(seed);
    let mut us: Vec<f64> = (0..interior).map(|_| rng.random_range(0.001..0.999)).collect();
    us.push(0.0);
    us.push(1.0);
    us.sort_by(f64::total_cmp);
    us.dedup();
    let knots: Vec<(f64, f64)> = us
        .into_iter()
        .map(|u| {
            let room = match side {
                Side::Improvement => 1.0 - u,
                Side::Harm => u,
            };
            let gap = rng.random::<f64>() * room;
            match side {
                Side::Improvement => (u, u + gap),
                Side::Harm => (u, u - gap),
            }
        })
        .collect();
    Ccf::from_knots(&knots).expect("distinct sorted knots")
}

/// Bundle text for any number of points. A bundle needs two points to load.
pub fn points_to_text(points: &[CcfPoint]) -> String {
    let mut out = format!("{CCF_FORMAT}\n# model_utility collab_utility se label provenance\n");
    for p in points {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            p.model_utility, p.collab_utility, p.se, p.label, p.provenance
        ));
    }
    out
}

/// One deployment epoch of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Recommender deployed in this epoch.
    pub recommender: String,
    pub instances: usize,
    /// Share of human labels identical to the recommendation.
    pub follow_rate: f64,
    pub model_utility: f64,
    pub collab_utility: f64,
    /// First and last training-epoch loss of the model fitted to this epoch's labels.
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopTrace {
    pub kind: UtilityKind,
    pub training: TrainingConfig,
    pub records: Vec<EpochRecord>,
}

impl LoopTrace {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.initial_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.final_loss)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_records<R: Read>(input: R) -> Result<Vec<EpochRecord>> {
        let records = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(csv_error)?;
        if records.iter().enumerate().any(|(k, r)| r.epoch != k + 1) {
            return Err(Error::Parse("loop trace epochs must run 1, 2, ...".into()));
        }
        Ok(records)
    }
}

/// Deploys `rec0`, collects human labels on fresh instances, retrains on that
/// epoch's labels only, and repeats.
pub fn run_performative_loop(
    rec0: &Recommender,
    human: &HumanModel,
    epochs: usize,
    per_epoch: usize,
    train_cfg: &TrainingConfig,
    kind: UtilityKind,
    seed: u64,
) -> Result<LoopTrace> {
    if epochs == 0 || per_epoch == 0 {
        return Err(Error::Parameter("epochs and per_epoch must be at least 1".into()));
    }
    human.validate()?;
    let mut current = rec0.clone();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let epoch_seed = rng::derive_seed(seed, epoch as u64);
        let instances = SolvedInstance::solve_all(
            GeneratorParams::default().generate_batch(per_epoch, epoch_seed)?,
        )?;
        let mut pairs = Vec::with_capacity(per_epoch);
        let (mut model_sum, mut collab_sum, mut followed) = (0.0, 0.0, 0usize);
        for (k, x) in instances.iter().enumerate() {
            let k = k as u64;
            let rec = current.recommend(&x.instance, rng::derive_seed(epoch_seed, 2 * k))?;
            let label = apply_human(human, x, &rec, rng::derive_seed(epoch_seed, 2 * k + 1))?;
            model_sum += x.utility(kind, &rec)?;
            collab_sum += x.utility(kind, &label)?;
            followed += usize::from(label == rec);
            pairs.push((x.instance.clone(), label));
        }
        let n = per_epoch as f64;
        let data = LabeledDataset::new(pairs, epoch as u32)?;
        let trained = train_imitation(
            &data,
            train_cfg,
            format!("m{}", epoch + 1),
            rng::derive_seed(seed, 1_000_000 + epoch as u64),
        )?;
        records.push(EpochRecord {
            epoch,
            recommender: current.label.clone(),
            instances: per_epoch,
            follow_rate: followed as f64 / n,
            model_utility: model_sum / n,
            collab_utility: collab_sum / n,
            initial_loss: trained.initial_loss(),
            final_loss: trained.final_loss(),
        });
        current = trained.recommender;
    }
    Ok(LoopTrace {
        kind,
        training: train_cfg.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn ccf_eval_examples() {
        let ccf = Ccf::empirical();
        assert!(close(ccf.eval(0.717), 0.894));
        assert!(close(ccf.eval(0.920), 0.926));
        assert!(close(ccf.eval((0.717 + 0.920) / 2.0), 0.910));
        assert!(close(ccf.eval(0.2), 0.894));
        assert!(close(ccf.eval(1.0), 0.926));
        assert!(close(ccf.points()[0].delta, 0.177));
        assert!(ccf.points().iter().all(|p| p.provenance == Provenance::Published));
    }

    #[test]
    fn ccf_validation() {
        assert!(Ccf::from_knots(&[(0.5, 0.5)]).is_err());
        assert!(Ccf::from_knots(&[(0.5, 0.5), (0.5, 0.7)]).is_err());
        assert!(Ccf::from_knots(&[(0.5, 1.5), (0.7, 0.7)]).is_err());
        let unsorted = Ccf::from_knots(&[(0.9, 0.95), (0.1, 0.3)]).unwrap();
        assert_eq!(unsorted.knots()[0], (0.1, 0.3));
    }

    #[test]
    fn bundle_text_round_trip_and_provenance() {
        let ccf = Ccf::empirical();
        assert_eq!(Ccf::parse(&ccf.to_text()).unwrap(), ccf);
        let mut user = Ccf::parse("0.717 0.894 0.01 q1 published\n0.80 0.90 0.01 q2 published\n0.92 0.926 0 q6\n")
            .unwrap();
        assert_eq!(user.points()[2].provenance, Provenance::Unverified);
        let warnings = user.mark_unverified_arms();
        assert_eq!(warnings.len(), 1);
        assert_eq!(user.points()[1].provenance, Provenance::Unverified);
        assert!(Ccf::parse("0.1 0.2 x q1\n0.3 0.4 0 q2\n").is_err());
        assert!(Ccf::parse("0.1 0.2 0 q1 rumor\n0.3 0.4 0 q2\n").is_err());
    }

    #[test]
    fn identity_ccf_is_stable_immediately() {
        let path = simulate_clp(&Ccf::identity(), 0.42, 5, 0.01, LearnerMap::Perfect).unwrap();
        assert_eq!(path.stable_at, Some(1));
        assert!(path.steps.iter().all(|s| close(s.model_utility, 0.42)));
    }

    #[test]
    fn empirical_path_reaches_the_fixed_point() {
        let path = simulate_clp(&Ccf::empirical(), 0.717, 10, 0.01, LearnerMap::Perfect).unwrap();
        assert_eq!(path.stable_at, Some(3));
        let s = path.steps[2];
        assert!(close(s.model_utility, 0.894 + 0.177 * 0.032 / 0.203));
        assert!(close(s.collab_utility, 0.926));
        for w in path.steps.windows(2) {
            assert!(close(w[1].model_utility, w[0].collab_utility) || path.stable_at.unwrap() <= w[0].epoch);
        }
        assert!((0.91..=0.94).contains(&path.final_utility()));
    }

    #[test]
    fn additive_staircase() {
        let knots: Vec<(f64, f64)> = (0..=100)
            .map(|k| {
                let u = f64::from(k) / 100.0;
                (u, (u + 0.05).min(1.0))
            })
            .collect();
        let ccf = Ccf::from_knots(&knots).unwrap();
        let path = simulate_clp(&ccf, 0.5, 30, 0.01, LearnerMap::Perfect).unwrap();
        let stable = path.stable_at.unwrap();
        for w in path.steps[..stable].windows(2) {
            assert!(w[1].model_utility > w[0].model_utility);
        }
        assert!(path.final_utility() >= 0.99);
    }

    #[test]
    fn clp_rejects_bad_parameters() {
        let ccf = Ccf::identity();
        assert!(simulate_clp(&ccf, 1.2, 5, 0.01, LearnerMap::Perfect).is_err());
        assert!(simulate_clp(&ccf, 0.5, 0, 0.01, LearnerMap::Perfect).is_err());
        assert!(simulate_clp(&ccf, 0.5, 5, 0.0, LearnerMap::Perfect).is_err());
    }

    #[test]
    fn tilted_learner() {
        let down = LearnerMap::AffineTilt { slope: 0.9, intercept: 0.0 };
        assert!(close(down.apply(0.5), 0.45));
        let up = LearnerMap::AffineTilt { slope: 1.2, intercept: 0.1 };
        assert_eq!(up.apply(0.95), 1.0);
        assert_eq!((LearnerMap::Perfect.slope(), LearnerMap::Perfect.intercept()), (1.0, 0.0));
        // A downward tilt lowers the stable point of the empirical CCF.
        let perfect = simulate_clp(&Ccf::empirical(), 0.717, 20, 0.01, LearnerMap::Perfect).unwrap();
        let tilted = simulate_clp(&Ccf::empirical(), 0.717, 20, 0.01, down).unwrap();
        assert!(tilted.final_utility() <= perfect.final_utility());
    }

    #[test]
    fn fixed_point_examples() {
        let id = find_fixed_points(&Ccf::identity(), 0.01);
        assert_eq!(id.len(), 2);
        assert!(id.iter().all(|p| p.stability == Stability::Neutral));

        let emp = find_fixed_points(&Ccf::empirical(), 0.01);
        assert_eq!(emp.len(), 1);
        assert!((emp[0].utility - 0.926).abs() < 1e-9);
        assert_eq!(emp[0].stability, Stability::Attracting);

        let above = Ccf::from_knots(&[(0.0, 0.3), (0.5, 0.8), (1.0, 1.0)]).unwrap();
        let fp = find_fixed_points(&above, 0.01);
        assert_eq!(fp.len(), 1);
        assert_eq!(fp[0].utility, 1.0);

        let steep = Ccf::from_knots(&[(0.0, 0.0), (0.4, 0.1), (0.6, 0.9), (1.0, 1.0)]).unwrap();
        let fp = find_fixed_points(&steep, 0.01);
        let mid = fp.iter().find(|p| (p.utility - 0.5).abs() < 1e-9).unwrap();
        assert_eq!(mid.stability, Stability::Repelling);
        assert_eq!(fp.len(), 3);
    }

    #[test]
    fn proposition_precondition() {
        let crossing = Ccf::from_knots(&[(0.0, 0.2), (1.0, 0.8)]).unwrap();
        for side in [Side::Improvement, Side::Harm] {
            assert!(matches!(
                check_proposition(&crossing, side, 10, 0.01, 0),
                Err(Error::Precondition(_))
            ));
        }
    }

    #[test]
    fn proposition_suites_small() {
        for seed in 0..100 {
            for side in [Side::Improvement, Side::Harm] {
                let ccf = random_side_ccf(side, 4, seed);
                let report = check_proposition(&ccf, side, 20, 0.01, seed).unwrap();
                assert!(report.passed(), "{side:?} seed {seed}");
            }
        }
    }

    #[test]
    fn path_csv_round_trip() {
        let path = simulate_clp(&Ccf::empirical(), 0.717, 6, 0.01, LearnerMap::Perfect).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let back = LearningPath::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn copycat_loop_keeps_utilities_equal() {
        let cfg = TrainingConfig {
            epochs: 3,
            hidden: vec![16],
            ..TrainingConfig::default()
        };
        let rec0 = Recommender::noisy_greedy("q1", 0.5);
        let trace =
            run_performative_loop(&rec0, &HumanModel::Copycat, 2, 40, &cfg, UtilityKind::Economic, 5)
                .unwrap();
        assert_eq!(trace.records.len(), 2);
        for r in &trace.records {
            assert_eq!(r.model_utility, r.collab_utility);
            assert_eq!(r.follow_rate, 1.0);
        }
        assert_eq!(trace.records[0].recommender, "q1");
        assert_eq!(trace.records[1].recommender, "m2");
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(LoopTrace::read_records(buf.as_slice()).unwrap(), trace.records);
    }

    #[test]
    fn best_of_two_loop_dominates_per_epoch() {
        let cfg = TrainingConfig {
            epochs: 3,
            hidden: vec![16],
            ..TrainingConfig::default()
        };
        let rec0 = Recommender::noisy_greedy("q1", 0.5);
        let human = HumanModel::BestOfTwo { budget: 100 };
        for kind in UtilityKind::ALL {
            let trace = run_performative_loop(&rec0, &human, 2, 60, &cfg, kind, 9).unwrap();
            for r in &trace.records {
                assert!(r.collab_utility >= r.model_utility);
            }
        }
        assert!(run_performative_loop(&rec0, &human, 0, 60, &cfg, UtilityKind::Economic, 9).is_err());
    }

    proptest! {
        #[test]
        fn perfect_learner_follows_collab(start in 0.0f64..=1.0, seed in 0u64..1000) {
            let ccf = random_side_ccf(Side::Improvement, 3, seed);
            let path = simulate_clp(&ccf, start, 50, 0.01, LearnerMap::Perfect).unwrap();
            let stable = path.stable_at.unwrap_or(usize::MAX);
            for w in path.steps.windows(2) {
                if w[1].epoch <= stable {
                    prop_assert_eq!(w[1].model_utility, w[0].collab_utility);
                }
            }
            if let Some(t) = path.stable_at {
                for s in &path.steps[t - 1..] {
                    prop_assert!((s.collab_utility - s.model_utility).abs() <= 0.01);
                    prop_assert_eq!(s.model_utility, path.steps[t - 1].model_utility);
                }
            }
        }

        #[test]
        fn fixed_points_lie_on_identity(seed in 0u64..10_000, interior in 0usize..6) {
            let mut rng = rng::seeded(seed);
            let knots: Vec<(f64, f64)> = (0..interior + 2)
                .map(|k| (k as f64 / (interior + 1) as f64, rng.random::<f64>()))
                .collect();
            let ccf = Ccf::from_knots(&knots).unwrap();
            for p in find_fixed_points(&ccf, 0.01) {
                prop_assert!((ccf.eval(p.utility) - p.utility).abs() <= 0.01);
            }
        }

        #[test]
        fn monotone_knots_give_monotone_eval(seed in 0u64..10_000) {
            let ccf = random_side_ccf(Side::Improvement, 5, seed);
            let mono = ccf.knots().windows(2).all(|w| w[1].1 >= w[0].1);
            let grid: Vec<f64> = (0..=200).map(|k| ccf.eval(f64::from(k) / 200.0)).collect();
            let eval_mono = grid.windows(2).all(|w| w[1] >= w[0]);
            if mono {
                prop_assert!(eval_mono);
            }
        }
    }
}
