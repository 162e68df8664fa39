//! Live-study backend: treatment assignment, timed problem delivery,
//! submission validation, payments and the append-only event log.
//!
//! The event log is the source of truth. Every state change is appended as one
//! JSON line and then applied to the in-memory session by the same function
//! that replays a log from disk, so a restarted service sees exactly the state
//! the log describes.
//!
//! # Event schema (version 1)
//!
//! Every line is a JSON object with these fields:
//!
//! | field        | type   | meaning                                        |
//! |--------------|--------|------------------------------------------------|
//! | `v`          | int    | schema version, always 1                       |
//! | `seq`        | int    | position in the log, from 0, no gaps           |
//! | `ts_ms`      | int    | server time, UTC milliseconds since the epoch  |
//! | `session_id` | string | opaque session token                           |
//! | `type`       | string | one of the event types below                   |
//!
//! plus the fields of its type:
//!
//! - `session_created`: `treatment` (`bonus`, `ml_arm`, `comprehension_quiz`),
//!   `seed`, `problems` (each `phase`, `problem_index`, `instance`, `optimum`,
//!   `recommendation` as a `0`/`1` string or null).
//! - `phase_advanced`: `from`, `to`.
//! - `problem_started`: `phase`, `problem_index`. `ts_ms` is the start time.
//! - `solution_submitted`: `phase`, `problem_index`, `selection` (`0`/`1`
//!   string), `client_elapsed_ms` (int or null), `elapsed_ms`,
//!   `auto_submitted`, `econ_utility`, `opt_utility`.
//! - `session_finalized`: `mean_econ_percent`, `payment_pence`.
//! - `session_excluded`: `reason`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knapsack::{
    optimal_value, utility_given_optimum, GeneratorParams, KnapsackInstance, Solution, UtilityKind,
};
use crate::recommend::{LabeledDataset, Recommend, Recommender};
use crate::rng;

pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bonus {
    None,
    B2,
    B10,
    B20,
}

impl Bonus {
    pub const ALL: [Bonus; 4] = [Bonus::None, Bonus::B2, Bonus::B10, Bonus::B20];

    /// Pence per percentage point above the threshold.
    pub fn rate_pence(self) -> u32 {
        match self {
            Bonus::None => 0,
            Bonus::B2 => 2,
            Bonus::B10 => 10,
            Bonus::B20 => 20,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bonus::None => "none",
            Bonus::B2 => "b2",
            Bonus::B10 => "b10",
            Bonus::B20 => "b20",
        }
    }
}

impl fmt::Display for Bonus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Bonus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Bonus::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown bonus {s:?} (none, b2, b10, b20)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlArm {
    None,
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
}

impl MlArm {
    pub const ALL: [MlArm; 7] = [
        MlArm::None,
        MlArm::Q1,
        MlArm::Q2,
        MlArm::Q3,
        MlArm::Q4,
        MlArm::Q5,
        MlArm::Q6,
    ];
    pub const MODELS: [MlArm; 6] = [MlArm::Q1, MlArm::Q2, MlArm::Q3, MlArm::Q4, MlArm::Q5, MlArm::Q6];

    pub fn name(self) -> &'static str {
        match self {
            MlArm::None => "none",
            MlArm::Q1 => "q1",
            MlArm::Q2 => "q2",
            MlArm::Q3 => "q3",
            MlArm::Q4 => "q4",
            MlArm::Q5 => "q5",
            MlArm::Q6 => "q6",
        }
    }

    /// Mean economic utility the arm's recommender is calibrated to.
    pub fn target_utility(self) -> Option<f64> {
        crate::recommend::TREATMENT_TARGETS
            .iter()
            .find(|(label, _)| *label == self.name())
            .map(|&(_, t)| t)
    }
}

impl fmt::Display for MlArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MlArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MlArm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown arm {s:?} (none, q1..q6)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentConfig {
    pub bonus: Bonus,
    pub ml_arm: MlArm,
    pub comprehension_quiz: bool,
}

const fn cell(bonus: Bonus, ml_arm: MlArm, comprehension_quiz: bool, n: u32) -> (TreatmentConfig, u32) {
    (
        TreatmentConfig {
            bonus,
            ml_arm,
            comprehension_quiz,
        },
        n,
    )
}

/// The eleven treatment cells with their published participant counts, used
/// as default assignment weights.
pub const TREATMENT_CELLS: [(TreatmentConfig, u32); 11] = [
    cell(Bonus::None, MlArm::None, false, 102),
    cell(Bonus::B2, MlArm::None, false, 98),
    cell(Bonus::B10, MlArm::None, false, 100),
    cell(Bonus::B10, MlArm::None, true, 117),
    cell(Bonus::B10, MlArm::Q1, true, 64),
    cell(Bonus::B10, MlArm::Q2, true, 78),
    cell(Bonus::B10, MlArm::Q3, true, 194),
    cell(Bonus::B10, MlArm::Q4, true, 179),
    cell(Bonus::B10, MlArm::Q5, true, 70),
    cell(Bonus::B10, MlArm::Q6, true, 191),
    cell(Bonus::B20, MlArm::None, false, 96),
];

impl TreatmentConfig {
    pub fn new(bonus: Bonus, ml_arm: MlArm, comprehension_quiz: bool) -> Result<Self> {
        let t = Self {
            bonus,
            ml_arm,
            comprehension_quiz,
        };
        t.validate()?;
        Ok(t)
    }

    /// Only the cells of the treatment matrix are valid.
    pub fn validate(&self) -> Result<()> {
        if TREATMENT_CELLS.iter().any(|(c, _)| c == self) {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "treatment (bonus {}, arm {}, quiz {}) is not a cell of the design",
                self.bonus, self.ml_arm, self.comprehension_quiz
            )))
        }
    }
}

/// Weighted random draw of a cell, reproducible from `seed`.
pub fn assign_treatment(cells: &[(TreatmentConfig, u32)], seed: u64) -> Result<TreatmentConfig> {
    let total: u64 = cells.iter().map(|&(_, w)| u64::from(w)).sum();
    if total == 0 {
        return Err(Error::Parameter("assignment weights sum to zero".into()));
    }
    let mut draw = rng::seeded(rng::derive_seed(seed, 0xA551)).random_range(0..total);
    for &(c, w) in cells {
        if draw < u64::from(w) {
            return Ok(c);
        }
        draw -= u64::from(w);
    }
    unreachable!("draw below total weight")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaymentRule {
    pub base_pence: u32,
    /// Mean economic performance (percent) required for any payment.
    pub threshold_percent: f64,
}

impl Default for PaymentRule {
    fn default() -> Self {
        Self {
            base_pence: 200,
            threshold_percent: 70.0,
        }
    }
}

impl PaymentRule {
    /// Base payment plus the bonus rate per whole percentage point above the
    /// threshold (half points round up); nothing below the threshold.
    pub fn compute(&self, mean_econ_percent: f64, bonus: Bonus) -> u32 {
        if mean_econ_percent.is_nan() || mean_econ_percent < self.threshold_percent {
            return 0;
        }
        let points = (mean_econ_percent - self.threshold_percent + 0.5).floor() as u32;
        self.base_pence + bonus.rate_pence() * points
    }
}

pub fn compute_payment(mean_econ_percent: f64, bonus: Bonus) -> u32 {
    PaymentRule::default().compute(mean_econ_percent, bonus)
}

pub trait Clock: Send + Sync {
    /// UTC milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tutorial,
    Practice,
    Main,
    Questionnaire,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    Practice,
    Main,
}

impl TrialPhase {
    fn of(phase: Phase) -> Option<Self> {
        match phase {
            Phase::Practice => Some(TrialPhase::Practice),
            Phase::Main => Some(TrialPhase::Main),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub instance: KnapsackInstance,
    pub optimum: u64,
    pub recommendation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        treatment: TreatmentConfig,
        seed: u64,
        problems: Vec<ProblemSpec>,
    },
    PhaseAdvanced {
        from: Phase,
        to: Phase,
    },
    ProblemStarted {
        phase: TrialPhase,
        problem_index: usize,
    },
    SolutionSubmitted {
        phase: TrialPhase,
        problem_index: usize,
        selection: String,
        client_elapsed_ms: Option<u64>,
        elapsed_ms: u64,
        auto_submitted: bool,
        econ_utility: f64,
        opt_utility: f64,
    },
    SessionFinalized {
        mean_econ_percent: f64,
        payment_pence: u32,
    },
    SessionExcluded {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub v: u32,
    pub seq: u64,
    pub ts_ms: u64,
    pub session_id: String,
    #[serde(flatten)]
    pub event: Event,
}

struct LogInner {
    file: Option<File>,
    events: Vec<LoggedEvent>,
}

/// Append-only, totally ordered event log, optionally mirrored to a JSONL file.
pub struct EventLog {
    inner: Mutex<LogInner>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(LogInner {
                file: None,
                events: Vec::new(),
            }),
        }
    }

    /// Opens (creating if needed) a JSONL log and loads its events.
    pub fn open(path: &Path) -> Result<Self> {
        let events = if path.exists() {
            read_jsonl(BufReader::new(File::open(path)?))?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(LogInner {
                file: Some(file),
                events,
            }),
        })
    }

    pub fn append(&self, ts_ms: u64, session_id: &str, event: Event) -> Result<LoggedEvent> {
        let mut inner = self.inner.lock().expect("log lock");
        let logged = LoggedEvent {
            v: EVENT_SCHEMA_VERSION,
            seq: inner.events.len() as u64,
            ts_ms,
            session_id: session_id.to_string(),
            event,
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&logged).map_err(|e| Error::Parse(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        inner.events.push(logged.clone());
        Ok(logged)
    }

    pub fn events(&self) -> Vec<LoggedEvent> {
        self.inner.lock().expect("log lock").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log lock").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parses a JSONL log, checking the version and that `seq` runs 0, 1, 2, ...
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<LoggedEvent>> {
    let mut events = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: LoggedEvent = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("log line {}: {e}", no + 1)))?;
        if ev.v != EVENT_SCHEMA_VERSION {
            return Err(Error::Parse(format!("log line {}: unsupported version {}", no + 1, ev.v)));
        }
        if ev.seq != events.len() as u64 {
            return Err(Error::Parse(format!(
                "log line {}: sequence {} where {} was expected",
                no + 1,
                ev.seq,
                events.len()
            )));
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn write_jsonl<W: Write>(mut out: W, events: &[LoggedEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub instance: KnapsackInstance,
    pub recommendation: Option<Solution>,
    pub submitted: Solution,
    pub started_at: u64,
    pub submitted_at: u64,
    pub elapsed_ms: u64,
    pub client_elapsed_ms: Option<u64>,
    pub auto_submitted: bool,
    pub econ_utility: f64,
    pub opt_utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenProblem {
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub started_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub treatment: TreatmentConfig,
    pub seed: u64,
    pub created_at: u64,
    pub phase: Phase,
    pub problems: Vec<ProblemSpec>,
    pub trials: Vec<TrialRecord>,
    pub open: Option<OpenProblem>,
    pub mean_econ_percent: Option<f64>,
    pub payment_pence: Option<u32>,
    pub excluded: Option<String>,
}

impl SessionRecord {
    fn created(ev: &LoggedEvent) -> Result<Self> {
        let Event::SessionCreated {
            treatment,
            seed,
            problems,
        } = &ev.event
        else {
            return Err(Error::Data(format!(
                "session {} has events before its creation",
                ev.session_id
            )));
        };
        Ok(Self {
            session_id: ev.session_id.clone(),
            treatment: *treatment,
            seed: *seed,
            created_at: ev.ts_ms,
            phase: Phase::Tutorial,
            problems: problems.clone(),
            trials: Vec::new(),
            open: None,
            mean_econ_percent: None,
            payment_pence: None,
            excluded: None,
        })
    }

    pub fn problem(&self, phase: TrialPhase, index: usize) -> Option<&ProblemSpec> {
        self.problems
            .iter()
            .find(|p| p.phase == phase && p.problem_index == index)
    }

    pub fn problem_count(&self, phase: TrialPhase) -> usize {
        self.problems.iter().filter(|p| p.phase == phase).count()
    }

    pub fn settled(&self, phase: TrialPhase) -> usize {
        self.trials.iter().filter(|t| t.phase == phase).count()
    }

    pub fn main_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.phase == TrialPhase::Main)
    }

    /// Mean economic utility of the main trials, in percent.
    pub fn mean_econ_percent_so_far(&self) -> Option<f64> {
        let (sum, n) = self
            .main_trials()
            .fold((0.0, 0usize), |(s, n), t| (s + t.econ_utility, n + 1));
        (n > 0).then(|| 100.0 * sum / n as f64)
    }

    /// Applies a logged event. Used for live updates and for replay alike.
    fn apply(&mut self, ev: &LoggedEvent) -> Result<()> {
        match &ev.event {
            Event::SessionCreated { .. } => {
                return Err(Error::Data(format!("session {} created twice", self.session_id)))
            }
            Event::PhaseAdvanced { from, to } => {
                if *from != self.phase || to <= from {
                    return Err(Error::Data(format!(
                        "session {}: bad phase change {from:?} -> {to:?}",
                        self.session_id
                    )));
                }
                self.phase = *to;
            }
            Event::ProblemStarted {
                phase,
                problem_index,
            } => {
                self.open = Some(OpenProblem {
                    phase: *phase,
                    problem_index: *problem_index,
                    started_at: ev.ts_ms,
                });
            }
            Event::SolutionSubmitted {
                phase,
                problem_index,
                selection,
                client_elapsed_ms,
                elapsed_ms,
                auto_submitted,
                econ_utility,
                opt_utility,
            } => {
                let open = self.open.take().ok_or_else(|| {
                    Error::Data(format!("session {}: submission without open problem", self.session_id))
                })?;
                let spec = self
                    .problem(*phase, *problem_index)
                    .ok_or_else(|| Error::Data(format!("unknown problem {problem_index}")))?;
                let instance = spec.instance.clone();
                let recommendation = spec
                    .recommendation
                    .as_deref()
                    .map(|bits| Solution::parse_bitstring(&instance, bits))
                    .transpose()?;
                let submitted = Solution::parse_bitstring(&instance, selection)?;
                self.trials.push(TrialRecord {
                    phase: *phase,
                    problem_index: *problem_index,
                    instance,
                    recommendation,
                    submitted,
                    started_at: open.started_at,
                    submitted_at: ev.ts_ms,
                    elapsed_ms: *elapsed_ms,
                    client_elapsed_ms: *client_elapsed_ms,
                    auto_submitted: *auto_submitted,
                    econ_utility: *econ_utility,
                    opt_utility: *opt_utility,
                });
            }
            Event::SessionFinalized {
                mean_econ_percent,
                payment_pence,
            } => {
                self.phase = Phase::Done;
                self.mean_econ_percent = Some(*mean_econ_percent);
                self.payment_pence = Some(*payment_pence);
            }
            Event::SessionExcluded { reason } => self.excluded = Some(reason.clone()),
        }
        Ok(())
    }
}

/// Replays a log into per-session state, in log order.
pub fn replay(events: &[LoggedEvent]) -> Result<BTreeMap<String, SessionRecord>> {
    let mut sessions: BTreeMap<String, SessionRecord> = BTreeMap::new();
    for ev in events {
        match sessions.get_mut(&ev.session_id) {
            Some(s) => s.apply(ev)?,
            None => {
                sessions.insert(ev.session_id.clone(), SessionRecord::created(ev)?);
            }
        }
    }
    Ok(sessions)
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub generator: GeneratorParams,
    pub practice_problems: usize,
    pub main_problems: usize,
    pub time_limit_ms: u64,
    pub grace_ms: u64,
    pub payment: PaymentRule,
    /// Cells and weights used by random assignment.
    pub cells: Vec<(TreatmentConfig, u32)>,
    /// Recommender serving each model arm.
    pub recommenders: BTreeMap<MlArm, Recommender>,
}

impl StudyConfig {
    pub fn new(recommenders: BTreeMap<MlArm, Recommender>) -> Self {
        Self {
            generator: GeneratorParams::default(),
            practice_problems: 2,
            main_problems: 10,
            time_limit_ms: 180_000,
            grace_ms: 2_000,
            payment: PaymentRule::default(),
            cells: TREATMENT_CELLS.to_vec(),
            recommenders,
        }
    }

    /// Calibrates a noisy-greedy recommender for every model arm on
    /// `instances` freshly generated problems.
    pub fn calibrated(instances: usize, seed: u64) -> Result<Self> {
        let eval = crate::knapsack::SolvedInstance::solve_all(
            GeneratorParams::default().generate_batch(instances, seed)?,
        )?;
        let mut recommenders = BTreeMap::new();
        for arm in MlArm::MODELS {
            let target = arm.target_utility().expect("model arms have targets");
            let cal = crate::recommend::calibrate_to_target(
                target,
                &eval,
                rng::derive_seed(seed, 1),
                arm.name(),
                Default::default(),
            )?;
            recommenders.insert(arm, cal.recommender);
        }
        Ok(Self::new(recommenders))
    }

    pub fn deadline_ms(&self) -> u64 {
        self.time_limit_ms + self.grace_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Assignment {
    Random,
    Forced { treatment: TreatmentConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub treatment: TreatmentConfig,
    pub phase: Phase,
    pub created_at_ms: u64,
    pub practice_done: usize,
    pub main_done: usize,
    pub excluded: bool,
    pub payment_pence: Option<u32>,
}

impl From<&SessionRecord> for SessionView {
    fn from(s: &SessionRecord) -> Self {
        Self {
            session_id: s.session_id.clone(),
            treatment: s.treatment,
            phase: s.phase,
            created_at_ms: s.created_at,
            practice_done: s.settled(TrialPhase::Practice),
            main_done: s.settled(TrialPhase::Main),
            excluded: s.excluded.is_some(),
            payment_pence: s.payment_pence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemView {
    pub session_id: String,
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub problem_count: usize,
    pub weights: Vec<u32>,
    pub values: Vec<u32>,
    pub capacity: u32,
    pub started_at_ms: u64,
    pub time_limit_ms: u64,
    pub server_now_ms: u64,
    pub recommendation: Option<Vec<bool>>,
    pub recommendation_value: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub problem_index: usize,
    pub selection: Vec<bool>,
    #[serde(default)]
    pub client_elapsed_ms: Option<u64>,
    /// Set by the client when its own countdown reached zero.
    #[serde(default)]
    pub auto_submitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeFeedback {
    pub econ_percent: f64,
    pub value: u64,
    pub optimal_value: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub auto_submitted: bool,
    pub elapsed_ms: u64,
    pub remaining_in_phase: usize,
    /// Present for practice problems only.
    pub feedback: Option<PracticeFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentSummary {
    pub session_id: String,
    pub mean_econ_percent: f64,
    pub payment_pence: u32,
}

/// Session store and operations. All operations on one session are serialized
/// by that session's lock; log appends are totally ordered by the log's lock.
pub struct StudyService {
    config: StudyConfig,
    clock: Arc<dyn Clock>,
    log: EventLog,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
}

impl StudyService {
    /// Builds the service state by replaying `log`.
    pub fn new(config: StudyConfig, log: EventLog, clock: Arc<dyn Clock>) -> Result<Self> {
        let sessions = replay(&log.events())?
            .into_iter()
            .map(|(id, s)| (id, Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            config,
            clock,
            log,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn in_memory(config: StudyConfig, clock: Arc<dyn Clock>) -> Self {
        Self::new(config, EventLog::in_memory(), clock).expect("empty log replays")
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn events(&self) -> Vec<LoggedEvent> {
        self.log.events()
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<SessionRecord>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    fn record(&self, session: &mut SessionRecord, ts: u64, event: Event) -> Result<()> {
        let logged = self.log.append(ts, &session.session_id, event)?;
        session.apply(&logged)
    }

    pub fn create_session(&self, assignment: Assignment, seed: u64) -> Result<SessionView> {
        let treatment = match assignment {
            Assignment::Random => assign_treatment(&self.config.cells, seed)?,
            Assignment::Forced { treatment } => {
                treatment.validate()?;
                treatment
            }
        };
        let recommender = match treatment.ml_arm {
            MlArm::None => None,
            arm => Some(self.config.recommenders.get(&arm).ok_or_else(|| {
                Error::Parameter(format!("no recommender configured for arm {arm}"))
            })?),
        };
        let mut problems = Vec::new();
        let phases = [
            (TrialPhase::Practice, self.config.practice_problems),
            (TrialPhase::Main, self.config.main_problems),
        ];
        let mut k = 0;
        for (phase, count) in phases {
            for problem_index in 1..=count {
                let problem_seed = rng::derive_seed(seed, 0x1000 + k);
                k += 1;
                let instance = self.config.generator.generate(problem_seed)?;
                let recommendation = match (phase, recommender) {
                    (TrialPhase::Main, Some(r)) => Some(
                        r.recommend(&instance, rng::derive_seed(problem_seed, 1))?
                            .to_bitstring(),
                    ),
                    _ => None,
                };
                problems.push(ProblemSpec {
                    phase,
                    problem_index,
                    optimum: optimal_value(&instance)?,
                    instance,
                    recommendation,
                });
            }
        }
        let mut map = self.sessions.write().expect("session map lock");
        let session_id = format!("{:016x}{:06x}", rng::derive_seed(seed, 0x1D), map.len());
        if map.contains_key(&session_id) {
            return Err(Error::Conflict(format!("session {session_id} already exists")));
        }
        let now = self.clock.now_ms();
        let logged = self.log.append(
            now,
            &session_id,
            Event::SessionCreated {
                treatment,
                seed,
                problems,
            },
        )?;
        let session = SessionRecord::created(&logged)?;
        let view = SessionView::from(&session);
        map.insert(session_id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn session(&self, id: &str) -> Result<SessionRecord> {
        Ok(self.handle(id)?.lock().expect("session lock").clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .expect("session map lock")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    fn ensure_active(session: &SessionRecord) -> Result<()> {
        if let Some(reason) = &session.excluded {
            return Err(Error::Phase(format!("session is excluded: {reason}")));
        }
        Ok(())
    }

    /// Moves to the next phase once the current one is complete.
    pub fn advance(&self, id: &str) -> Result<SessionView> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session lock");
        Self::ensure_active(&s)?;
        if s.open.is_some() {
            return Err(Error::Phase("a problem is still open".into()));
        }
        let to = match s.phase {
            Phase::Tutorial => Phase::Practice,
            Phase::Practice if s.settled(TrialPhase::Practice) == s.problem_count(TrialPhase::Practice) => {
                Phase::Main
            }
            Phase::Main if s.settled(TrialPhase::Main) == s.problem_count(TrialPhase::Main) => {
                Phase::Questionnaire
            }
            Phase::Practice | Phase::Main => {
                return Err(Error::Phase(format!("{:?} phase has unsolved problems", s.phase)))
            }
            Phase::Questionnaire | Phase::Done => {
                return Err(Error::Phase(format!("cannot advance from {:?}; finalize instead", s.phase)))
            }
        };
        let from = s.phase;
        self.record(&mut s, self.clock.now_ms(), Event::PhaseAdvanced { from, to })?;
        Ok(SessionView::from(&*s))
    }

    /// Current problem of the session. Repeated calls return the same problem
    /// until it is submitted; the first call starts its clock.
    pub fn next_problem(&self, id: &str) -> Result<ProblemView> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session lock");
        Self::ensure_active(&s)?;
        let phase = TrialPhase::of(s.phase)
            .ok_or_else(|| Error::Phase(format!("no problems in the {:?} phase", s.phase)))?;
        let now = self.clock.now_ms();
        let open = match s.open {
            Some(open) => open,
            None => {
                let index = s.settled(phase) + 1;
                if index > s.problem_count(phase) {
                    return Err(Error::Phase(format!("all {phase:?} problems are solved; advance")));
                }
                self.record(
                    &mut s,
                    now,
                    Event::ProblemStarted {
                        phase,
                        problem_index: index,
                    },
                )?;
                s.open.expect("just opened")
            }
        };
        let spec = s
            .problem(open.phase, open.problem_index)
            .expect("open problem exists");
        let recommendation = spec
            .recommendation
            .as_deref()
            .map(|bits| Solution::parse_bitstring(&spec.instance, bits))
            .transpose()?;
        Ok(ProblemView {
            session_id: s.session_id.clone(),
            phase: open.phase,
            problem_index: open.problem_index,
            problem_count: s.problem_count(open.phase),
            weights: spec.instance.weights().to_vec(),
            values: spec.instance.values().to_vec(),
            capacity: spec.instance.capacity(),
            started_at_ms: open.started_at,
            time_limit_ms: self.config.time_limit_ms,
            server_now_ms: now,
            recommendation_value: recommendation.as_ref().map(Solution::total_value),
            recommendation: recommendation.map(Solution::into_selection),
        })
    }

    pub fn submit_solution(&self, id: &str, req: &SubmitRequest) -> Result<SubmitResponse> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session lock");
        Self::ensure_active(&s)?;
        let phase = TrialPhase::of(s.phase)
            .ok_or_else(|| Error::Phase(format!("no problems in the {:?} phase", s.phase)))?;
        if s
            .trials
            .iter()
            .any(|t| t.phase == phase && t.problem_index == req.problem_index)
        {
            return Err(Error::Conflict(format!(
                "{phase:?} problem {} was already submitted",
                req.problem_index
            )));
        }
        let open = match s.open {
            Some(o) if o.phase == phase && o.problem_index == req.problem_index => o,
            _ => {
                return Err(Error::Phase(format!(
                    "{phase:?} problem {} is not open",
                    req.problem_index
                )))
            }
        };
        let spec = s.problem(phase, open.problem_index).expect("open problem exists");
        let solution = Solution::from_selection(&spec.instance, req.selection.clone())?;
        solution.ensure_feasible(&spec.instance)?;
        let optimum = spec.optimum;
        let now = self.clock.now_ms();
        let feedback = self.settle(&mut s, open, solution, optimum, now, req.client_elapsed_ms, req.auto_submitted)?;
        Ok(SubmitResponse {
            phase,
            problem_index: open.problem_index,
            auto_submitted: s.trials.last().expect("just settled").auto_submitted,
            elapsed_ms: s.trials.last().expect("just settled").elapsed_ms,
            remaining_in_phase: s.problem_count(phase) - s.settled(phase),
            feedback: (phase == TrialPhase::Practice).then_some(feedback),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn settle(
        &self,
        s: &mut SessionRecord,
        open: OpenProblem,
        solution: Solution,
        optimum: u64,
        now: u64,
        client_elapsed_ms: Option<u64>,
        client_auto: bool,
    ) -> Result<PracticeFeedback> {
        let elapsed = now.saturating_sub(open.started_at);
        let late = elapsed > self.config.deadline_ms();
        let econ = utility_given_optimum(UtilityKind::Economic, solution.total_value(), optimum);
        let opt = utility_given_optimum(UtilityKind::Optimality, solution.total_value(), optimum);
        self.record(
            s,
            now,
            Event::SolutionSubmitted {
                phase: open.phase,
                problem_index: open.problem_index,
                selection: solution.to_bitstring(),
                client_elapsed_ms,
                elapsed_ms: elapsed.min(self.config.deadline_ms()),
                auto_submitted: late || client_auto,
                econ_utility: econ,
                opt_utility: opt,
            },
        )?;
        Ok(PracticeFeedback {
            econ_percent: 100.0 * econ,
            value: solution.total_value(),
            optimal_value: optimum,
        })
    }

    /// Auto-submits the empty selection for every problem whose clock ran out
    /// without a submission. Returns how many were settled.
    pub fn sweep_expired(&self) -> Result<usize> {
        let handles: Vec<_> = self
            .sessions
            .read()
            .expect("session map lock")
            .values()
            .cloned()
            .collect();
        let mut settled = 0;
        for handle in handles {
            let mut s = handle.lock().expect("session lock");
            let Some(open) = s.open else { continue };
            let now = self.clock.now_ms();
            if s.excluded.is_some() || now.saturating_sub(open.started_at) <= self.config.deadline_ms() {
                continue;
            }
            let spec = s.problem(open.phase, open.problem_index).expect("open problem exists");
            let empty = Solution::empty(&spec.instance);
            let optimum = spec.optimum;
            self.settle(&mut s, open, empty, optimum, now, None, true)?;
            settled += 1;
        }
        Ok(settled)
    }

    /// Computes and records the payment once all main problems are solved.
    pub fn finalize(&self, id: &str) -> Result<PaymentSummary> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session lock");
        Self::ensure_active(&s)?;
        if s.phase == Phase::Done {
            return Err(Error::Conflict("session is already finalized".into()));
        }
        let complete = s.settled(TrialPhase::Main) == s.problem_count(TrialPhase::Main);
        if !(s.phase == Phase::Questionnaire || (s.phase == Phase::Main && complete)) {
            return Err(Error::Phase(format!(
                "cannot finalize in the {:?} phase with {} of {} main problems solved",
                s.phase,
                s.settled(TrialPhase::Main),
                s.problem_count(TrialPhase::Main)
            )));
        }
        let mean = s.mean_econ_percent_so_far().unwrap_or(0.0);
        let payment = self.config.payment.compute(mean, s.treatment.bonus);
        self.record(
            &mut s,
            self.clock.now_ms(),
            Event::SessionFinalized {
                mean_econ_percent: mean,
                payment_pence: payment,
            },
        )?;
        Ok(PaymentSummary {
            session_id: s.session_id.clone(),
            mean_econ_percent: mean,
            payment_pence: payment,
        })
    }

    /// Marks a session excluded (for instance after a page reload). Its events
    /// stay in the log.
    pub fn exclude(&self, id: &str, reason: &str) -> Result<SessionView> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session lock");
        if s.excluded.is_some() {
            return Err(Error::Conflict("session is already excluded".into()));
        }
        self.record(
            &mut s,
            self.clock.now_ms(),
            Event::SessionExcluded {
                reason: reason.to_string(),
            },
        )?;
        Ok(SessionView::from(&*s))
    }

    pub fn export_trials(&self, filter: &ExportFilter) -> Result<Vec<TrialExport>> {
        trials_from_events(&self.log.events(), filter)
    }

    pub fn export_epoch_dataset(&self, filter: &ExportFilter, epoch: u32) -> Result<LabeledDataset> {
        epoch_dataset(&self.export_trials(filter)?, epoch)
    }
}

/// One settled trial with everything needed to analyse or retrain on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialExport {
    pub session_id: String,
    pub treatment: TreatmentConfig,
    pub excluded: bool,
    pub completed: bool,
    pub phase: TrialPhase,
    pub problem_index: usize,
    pub instance: KnapsackInstance,
    pub optimum: u64,
    pub recommendation: Option<String>,
    pub submitted: String,
    pub started_at_ms: u64,
    pub submitted_at_ms: u64,
    pub elapsed_ms: u64,
    pub auto_submitted: bool,
    pub econ_utility: f64,
    pub opt_utility: f64,
}

impl TrialExport {
    pub fn submitted_solution(&self) -> Result<Solution> {
        Solution::parse_bitstring(&self.instance, &self.submitted)
    }

    pub fn recommended_solution(&self) -> Result<Option<Solution>> {
        self.recommendation
            .as_deref()
            .map(|b| Solution::parse_bitstring(&self.instance, b))
            .transpose()
    }

    pub fn utility(&self, kind: UtilityKind) -> f64 {
        match kind {
            UtilityKind::Economic => self.econ_utility,
            UtilityKind::Optimality => self.opt_utility,
        }
    }

    /// Utility of the recommendation, if there was one.
    pub fn recommendation_utility(&self, kind: UtilityKind) -> Result<Option<f64>> {
        Ok(self
            .recommended_solution()?
            .map(|r| utility_given_optimum(kind, r.total_value(), self.optimum)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportFilter {
    pub arm: Option<MlArm>,
    pub bonus: Option<Bonus>,
    pub phase: Option<TrialPhase>,
    pub include_excluded: bool,
    pub completed_only: bool,
}

impl Default for ExportFilter {
    /// Main trials of completed, non-excluded sessions.
    fn default() -> Self {
        Self {
            arm: None,
            bonus: None,
            phase: Some(TrialPhase::Main),
            include_excluded: false,
            completed_only: true,
        }
    }
}

impl ExportFilter {
    fn accepts(&self, s: &SessionRecord, t: &TrialRecord) -> bool {
        self.arm.is_none_or(|a| a == s.treatment.ml_arm)
            && self.bonus.is_none_or(|b| b == s.treatment.bonus)
            && self.phase.is_none_or(|p| p == t.phase)
            && (self.include_excluded || s.excluded.is_none())
            && (!self.completed_only || s.phase == Phase::Done)
    }
}

pub fn trials_from_events(events: &[LoggedEvent], filter: &ExportFilter) -> Result<Vec<TrialExport>> {
    let mut out = Vec::new();
    for s in replay(events)?.values() {
        for t in s.trials.iter().filter(|t| filter.accepts(s, t)) {
            let spec = s.problem(t.phase, t.problem_index).expect("trial has a problem");
            out.push(TrialExport {
                session_id: s.session_id.clone(),
                treatment: s.treatment,
                excluded: s.excluded.is_some(),
                completed: s.phase == Phase::Done,
                phase: t.phase,
                problem_index: t.problem_index,
                instance: t.instance.clone(),
                optimum: spec.optimum,
                recommendation: spec.recommendation.clone(),
                submitted: t.submitted.to_bitstring(),
                started_at_ms: t.started_at,
                submitted_at_ms: t.submitted_at,
                elapsed_ms: t.elapsed_ms,
                auto_submitted: t.auto_submitted,
                econ_utility: t.econ_utility,
                opt_utility: t.opt_utility,
            });
        }
    }
    Ok(out)
}

pub fn write_ndjson<W: Write>(mut out: W, trials: &[TrialExport]) -> Result<()> {
    for t in trials {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<TrialExport>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(no, line)| {
            serde_json::from_str(&line?).map_err(|e| Error::Parse(format!("export line {}: {e}", no + 1)))
        })
        .collect()
}

/// `(instance, submitted solution)` pairs for retraining.
pub fn epoch_dataset(trials: &[TrialExport], epoch: u32) -> Result<LabeledDataset> {
    if trials.is_empty() {
        return Err(Error::Data("no trials match the export filter".into()));
    }
    let pairs = trials
        .iter()
        .map(|t| Ok((t.instance.clone(), t.submitted_solution()?)))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(pairs, epoch)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub sessions: usize,
    pub trials: usize,
    /// Trials whose logged utilities differ from a fresh exact solve.
    pub utility_mismatches: Vec<String>,
    pub payment_mismatches: Vec<String>,
    /// Late trials not flagged as automatic, or elapsed times above the deadline.
    pub timer_violations: Vec<String>,
    pub infeasible: Vec<String>,
    pub overfull_sessions: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.utility_mismatches.is_empty()
            && self.payment_mismatches.is_empty()
            && self.timer_violations.is_empty()
            && self.infeasible.is_empty()
            && self.overfull_sessions.is_empty()
    }
}

/// Recomputes every utility and payment in the log from first principles.
pub fn audit(events: &[LoggedEvent], config: &StudyConfig) -> Result<AuditReport> {
    let sessions = replay(events)?;
    let mut report = AuditReport {
        sessions: sessions.len(),
        ..AuditReport::default()
    };
    for s in sessions.values() {
        if s.settled(TrialPhase::Main) > config.main_problems {
            report.overfull_sessions.push(s.session_id.clone());
        }
        for t in &s.trials {
            report.trials += 1;
            let tag = format!("{}/{:?}/{}", s.session_id, t.phase, t.problem_index);
            if !t.submitted.is_feasible(&t.instance) {
                report.infeasible.push(tag.clone());
            }
            let optimum = optimal_value(&t.instance)?;
            let econ = utility_given_optimum(UtilityKind::Economic, t.submitted.total_value(), optimum);
            let opt = utility_given_optimum(UtilityKind::Optimality, t.submitted.total_value(), optimum);
            if econ.to_bits() != t.econ_utility.to_bits() || opt.to_bits() != t.opt_utility.to_bits() {
                report.utility_mismatches.push(tag.clone());
            }
            let late = t.submitted_at.saturating_sub(t.started_at) > config.deadline_ms();
            if (late && !t.auto_submitted) || t.elapsed_ms > config.deadline_ms() {
                report.timer_violations.push(tag);
            }
        }
        if let (Some(mean), Some(paid)) = (s.mean_econ_percent, s.payment_pence) {
            let recomputed_mean = s.mean_econ_percent_so_far().unwrap_or(0.0);
            let due = config.payment.compute(recomputed_mean, s.treatment.bonus);
            if recomputed_mean.to_bits() != mean.to_bits() || due != paid {
                report.payment_mismatches.push(s.session_id.clone());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> StudyConfig {
        let sigmas = [0.55, 0.41, 0.37, 0.32, 0.30, 0.28];
        let recs = MlArm::MODELS
            .iter()
            .zip(sigmas)
            .map(|(&arm, s)| (arm, Recommender::noisy_greedy(arm.name(), s)))
            .collect();
        StudyConfig::new(recs)
    }

    fn service() -> (StudyService, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_700_000_000_000));
        (StudyService::in_memory(quick_config(), clock.clone()), clock)
    }

    fn forced(bonus: Bonus, arm: MlArm, quiz: bool) -> Assignment {
        Assignment::Forced {
            treatment: TreatmentConfig::new(bonus, arm, quiz).unwrap(),
        }
    }

    fn submit(svc: &StudyService, id: &str, view: &ProblemView, sel: Vec<bool>) -> Result<SubmitResponse> {
        svc.submit_solution(
            id,
            &SubmitRequest {
                problem_index: view.problem_index,
                selection: sel,
                client_elapsed_ms: Some(1000),
                auto_submitted: false,
            },
        )
    }

    /// Runs a whole session, submitting the recommendation when present.
    fn complete(svc: &StudyService, clock: &ManualClock, id: &str) -> PaymentSummary {
        svc.advance(id).unwrap();
        for _ in 0..2 {
            let v = svc.next_problem(id).unwrap();
            clock.advance(5_000);
            submit(svc, id, &v, vec![false; v.weights.len()]).unwrap();
        }
        svc.advance(id).unwrap();
        for _ in 0..10 {
            let v = svc.next_problem(id).unwrap();
            clock.advance(30_000);
            let sel = v.recommendation.clone().unwrap_or(vec![false; v.weights.len()]);
            submit(svc, id, &v, sel).unwrap();
        }
        svc.advance(id).unwrap();
        svc.finalize(id).unwrap()
    }

    #[test]
    fn payment_golden_cases() {
        assert_eq!(compute_payment(85.0, Bonus::B2), 230);
        assert_eq!(compute_payment(70.0, Bonus::B20), 200);
        assert_eq!(compute_payment(69.9, Bonus::B10), 0);
        assert_eq!(compute_payment(70.5, Bonus::B10), 210);
        assert_eq!(compute_payment(70.49, Bonus::B10), 200);
        assert_eq!(compute_payment(100.0, Bonus::None), 200);
        assert_eq!(compute_payment(100.0, Bonus::B20), 800);
    }

    #[test]
    fn treatment_cells() {
        assert!(TreatmentConfig::new(Bonus::B2, MlArm::Q1, true).is_err());
        assert!(TreatmentConfig::new(Bonus::B10, MlArm::Q3, true).is_ok());
        assert!(TreatmentConfig::new(Bonus::None, MlArm::None, false).is_ok());
        assert_eq!(TREATMENT_CELLS.iter().map(|c| c.1).sum::<u32>(), 1289);
        assert_eq!("b20".parse::<Bonus>().unwrap(), Bonus::B20);
        assert_eq!("q4".parse::<MlArm>().unwrap(), MlArm::Q4);
        assert_eq!(MlArm::Q1.target_utility(), Some(0.717));
        assert_eq!(MlArm::None.target_utility(), None);
    }

    #[test]
    fn forced_ml_session_carries_recommendations() {
        let (svc, _) = service();
        let view = svc.create_session(forced(Bonus::B10, MlArm::Q6, true), 3).unwrap();
        let s = svc.session(&view.session_id).unwrap();
        assert_eq!(s.problems.len(), 12);
        for p in &s.problems {
            assert_eq!(p.recommendation.is_some(), p.phase == TrialPhase::Main);
        }
        let plain = svc.create_session(forced(Bonus::None, MlArm::None, false), 4).unwrap();
        let s = svc.session(&plain.session_id).unwrap();
        assert!(s.problems.iter().all(|p| p.recommendation.is_none()));
    }

    #[test]
    fn random_assignment_is_reproducible() {
        let a: Vec<_> = (0..50).map(|k| assign_treatment(&TREATMENT_CELLS, k).unwrap()).collect();
        let b: Vec<_> = (0..50).map(|k| assign_treatment(&TREATMENT_CELLS, k).unwrap()).collect();
        assert_eq!(a, b);
        let (svc, _) = service();
        let v = svc.create_session(Assignment::Random, 17).unwrap();
        assert_eq!(v.treatment, assign_treatment(&TREATMENT_CELLS, 17).unwrap());
    }

    #[test]
    fn assignment_frequencies_match_weights() {
        let sessions = 10_000u64;
        let mut counts = vec![0u64; TREATMENT_CELLS.len()];
        for k in 0..sessions {
            let t = assign_treatment(&TREATMENT_CELLS, rng::derive_seed(99, k)).unwrap();
            counts[TREATMENT_CELLS.iter().position(|c| c.0 == t).unwrap()] += 1;
        }
        let total: f64 = TREATMENT_CELLS.iter().map(|c| f64::from(c.1)).sum();
        let chi2: f64 = TREATMENT_CELLS
            .iter()
            .zip(&counts)
            .map(|((_, w), &n)| {
                let e = sessions as f64 * f64::from(*w) / total;
                (n as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9th percentile of chi-square with 10 degrees of freedom.
        assert!(chi2 < 29.59, "chi2 = {chi2}");
    }

    #[test]
    fn problem_flow_and_phase_errors() {
        let (svc, clock) = service();
        let id = svc.create_session(forced(Bonus::B10, MlArm::Q3, true), 5).unwrap().session_id;
        assert!(matches!(svc.next_problem(&id), Err(Error::Phase(_))));
        assert!(matches!(svc.next_problem("nope"), Err(Error::UnknownSession(_))));
        svc.advance(&id).unwrap();
        let first = svc.next_problem(&id).unwrap();
        clock.advance(700);
        let again = svc.next_problem(&id).unwrap();
        assert_eq!(first.problem_index, again.problem_index);
        assert_eq!(first.started_at_ms, again.started_at_ms);
        assert!(first.recommendation.is_none(), "practice has no recommendation");
        assert!(matches!(svc.advance(&id), Err(Error::Phase(_))));

        let over = vec![true; 18];
        assert!(matches!(submit(&svc, &id, &first, over), Err(Error::Infeasible { .. })));
        assert!(matches!(submit(&svc, &id, &first, vec![false; 3]), Err(Error::Shape { .. })));
        let fb = submit(&svc, &id, &first, vec![false; 18]).unwrap();
        assert_eq!(fb.feedback.unwrap().econ_percent, 0.0);
        assert!(matches!(submit(&svc, &id, &first, vec![false; 18]), Err(Error::Conflict(_))));

        let second = svc.next_problem(&id).unwrap();
        assert_eq!(second.problem_index, 2);
        submit(&svc, &id, &second, vec![false; 18]).unwrap();
        assert!(matches!(svc.next_problem(&id), Err(Error::Phase(_))));
        svc.advance(&id).unwrap();
        let main = svc.next_problem(&id).unwrap();
        assert_eq!(main.recommendation.as_ref().map(Vec::len), Some(18));
        let ack = submit(&svc, &id, &main, main.recommendation.clone().unwrap()).unwrap();
        assert!(ack.feedback.is_none());
        assert_eq!(ack.remaining_in_phase, 9);
        assert!(matches!(svc.finalize(&id), Err(Error::Phase(_))));
    }

    #[test]
    fn late_and_missing_submissions_are_automatic() {
        let (svc, clock) = service();
        let id = svc.create_session(forced(Bonus::B2, MlArm::None, false), 6).unwrap().session_id;
        svc.advance(&id).unwrap();
        let v = svc.next_problem(&id).unwrap();
        clock.advance(182_000);
        let on_time = submit(&svc, &id, &v, vec![false; 18]).unwrap();
        assert!(!on_time.auto_submitted, "inside the grace period");
        let v = svc.next_problem(&id).unwrap();
        clock.advance(182_001);
        let late = submit(&svc, &id, &v, vec![false; 18]).unwrap();
        assert!(late.auto_submitted);
        assert_eq!(late.elapsed_ms, 182_000);

        svc.advance(&id).unwrap();
        svc.next_problem(&id).unwrap();
        clock.advance(100_000);
        assert_eq!(svc.sweep_expired().unwrap(), 0);
        clock.advance(100_000);
        assert_eq!(svc.sweep_expired().unwrap(), 1);
        let t = svc.session(&id).unwrap().trials.last().cloned().unwrap();
        assert!(t.auto_submitted && t.submitted.selected_indices().is_empty());
        assert!(audit(&svc.events(), svc.config()).unwrap().is_clean());
    }

    #[test]
    fn full_session_payment_and_audit() {
        let (svc, clock) = service();
        let id = svc.create_session(forced(Bonus::B10, MlArm::Q6, true), 7).unwrap().session_id;
        let pay = complete(&svc, &clock, &id);
        let s = svc.session(&id).unwrap();
        assert_eq!(s.phase, Phase::Done);
        assert_eq!(s.main_trials().count(), 10);
        assert_eq!(pay.payment_pence, compute_payment(pay.mean_econ_percent, Bonus::B10));
        assert!(matches!(svc.finalize(&id), Err(Error::Conflict(_))));
        let report = audit(&svc.events(), svc.config()).unwrap();
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(report.trials, 12);
    }

    #[test]
    fn audit_catches_tampering() {
        let (svc, clock) = service();
        let id = svc.create_session(forced(Bonus::B20, MlArm::None, false), 8).unwrap().session_id;
        complete(&svc, &clock, &id);
        let mut events = svc.events();
        for ev in &mut events {
            match &mut ev.event {
                Event::SolutionSubmitted { econ_utility, .. } => *econ_utility = 0.99,
                Event::SessionFinalized { payment_pence, .. } => *payment_pence += 1,
                _ => {}
            }
        }
        let report = audit(&events, svc.config()).unwrap();
        assert_eq!(report.utility_mismatches.len(), 12);
        assert_eq!(report.payment_mismatches.len(), 1);
    }

    #[test]
    fn exclusion_blocks_operations_and_filters_exports() {
        let (svc, clock) = service();
        let a = svc.create_session(forced(Bonus::B10, MlArm::Q1, true), 9).unwrap().session_id;
        let b = svc.create_session(forced(Bonus::B10, MlArm::Q1, true), 10).unwrap().session_id;
        complete(&svc, &clock, &a);
        complete(&svc, &clock, &b);
        svc.exclude(&b, "reload").unwrap();
        assert!(matches!(svc.next_problem(&b), Err(Error::Phase(_))));
        let kept = svc.export_trials(&ExportFilter::default()).unwrap();
        assert_eq!(kept.len(), 10);
        assert!(kept.iter().all(|t| t.session_id == a));
        let all = svc
            .export_trials(&ExportFilter {
                include_excluded: true,
                ..ExportFilter::default()
            })
            .unwrap();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn export_filters_and_round_trip() {
        let (svc, clock) = service();
        let q1 = svc.create_session(forced(Bonus::B10, MlArm::Q1, true), 11).unwrap().session_id;
        let q6 = svc.create_session(forced(Bonus::B10, MlArm::Q6, true), 12).unwrap().session_id;
        let open = svc.create_session(forced(Bonus::B10, MlArm::Q1, true), 13).unwrap().session_id;
        complete(&svc, &clock, &q1);
        complete(&svc, &clock, &q6);
        svc.advance(&open).unwrap();
        let only_q1 = ExportFilter {
            arm: Some(MlArm::Q1),
            ..ExportFilter::default()
        };
        let trials = svc.export_trials(&only_q1).unwrap();
        assert_eq!(trials.len(), 10);
        assert!(trials.iter().all(|t| t.treatment.ml_arm == MlArm::Q1 && t.completed));

        let mut buf = Vec::new();
        write_ndjson(&mut buf, &trials).unwrap();
        let back = read_ndjson(buf.as_slice()).unwrap();
        assert_eq!(back, trials);
        let direct = svc.export_epoch_dataset(&only_q1, 2).unwrap();
        assert_eq!(epoch_dataset(&back, 2).unwrap(), direct);
        assert_eq!(direct.len(), 10);

        let none = ExportFilter {
            arm: Some(MlArm::Q4),
            ..ExportFilter::default()
        };
        assert!(matches!(svc.export_epoch_dataset(&none, 0), Err(Error::Data(_))));
    }

    #[test]
    fn log_file_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let clock = Arc::new(ManualClock::new(1_000));
        let id = {
            let svc = StudyService::new(quick_config(), EventLog::open(&path).unwrap(), clock.clone()).unwrap();
            let id = svc.create_session(forced(Bonus::B10, MlArm::Q2, true), 14).unwrap().session_id;
            complete(&svc, &clock, &id);
            id
        };
        let svc = StudyService::new(quick_config(), EventLog::open(&path).unwrap(), clock.clone()).unwrap();
        let s = svc.session(&id).unwrap();
        assert_eq!(s.phase, Phase::Done);
        assert_eq!(s.trials.len(), 12);
        let text = std::fs::read(&path).unwrap();
        let events = read_jsonl(text.as_slice()).unwrap();
        let mut again = Vec::new();
        write_jsonl(&mut again, &events).unwrap();
        assert_eq!(again, text);
        // New events continue the sequence.
        svc.create_session(Assignment::Random, 15).unwrap();
        let events = read_jsonl(std::fs::read(&path).unwrap().as_slice()).unwrap();
        assert_eq!(events.len(), svc.events().len());
    }

    #[test]
    fn corrupt_logs_are_rejected() {
        let (svc, _) = service();
        svc.create_session(Assignment::Random, 1).unwrap();
        svc.create_session(Assignment::Random, 2).unwrap();
        let mut events = svc.events();
        events.swap(0, 1);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &events).unwrap();
        assert!(read_jsonl(buf.as_slice()).is_err());
        assert!(read_jsonl("{\"v\":2}\n".as_bytes()).is_err());
    }

    #[test]
    fn concurrent_sessions_keep_per_session_order() {
        let clock = Arc::new(ManualClock::new(0));
        let svc = Arc::new(StudyService::in_memory(quick_config(), clock.clone()));
        let ids: Vec<String> = (0..8)
            .map(|k| svc.create_session(forced(Bonus::B10, MlArm::Q3, true), 100 + k).unwrap().session_id)
            .collect();
        std::thread::scope(|scope| {
            for id in &ids {
                let svc = svc.clone();
                let clock = clock.clone();
                scope.spawn(move || {
                    complete(&svc, &clock, id);
                });
            }
        });
        let sessions = replay(&svc.events()).unwrap();
        assert_eq!(sessions.len(), 8);
        for s in sessions.values() {
            assert_eq!(s.phase, Phase::Done);
            let idx: Vec<usize> = s.main_trials().map(|t| t.problem_index).collect();
            assert_eq!(idx, (1..=10).collect::<Vec<_>>());
        }
    }
}
