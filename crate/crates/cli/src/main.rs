use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use collab_core::analysis::{
    estimate_ccf_from_trials, follow_ignore_decomposition, simulate_study_log, write_trial_csv, SE_NOTE,
};
use collab_core::dynamics::{find_fixed_points, points_to_text, run_performative_loop, simulate_clp, DEFAULT_EPSILON_HAT};
use collab_core::knapsack::{
    read_instances, solve_bruteforce, solve_exact, write_instances, GeneratorParams, SolvedInstance,
};
use collab_core::recommend::{
    calibrate_to_target, evaluate_recommender, read_recommender, train_imitation, write_recommender,
    CalibrationOptions, LabeledDataset, TrainingConfig,
};
use collab_core::study::{
    read_jsonl, read_ndjson, trials_from_events, write_ndjson, Bonus, EventLog, ExportFilter, MlArm,
    StudyConfig, StudyService, SystemClock, TrialExport, TrialPhase,
};
use collab_core::{verify, Ccf, HumanModel, LearnerMap, Recommender, UtilityKind};

#[derive(Parser)]
#[command(name = "collab", version, about = "Human-ML collaboration lab on 0-1 knapsack")]
struct Cli {
    /// Base seed; every command is deterministic given it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate hard instances in the tab-separated instance format.
    Generate {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 18)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        w_min: u32,
        #[arg(long, default_value_t = 250)]
        w_max: u32,
    },
    /// Solve an instance file exactly.
    Solve {
        input: PathBuf,
        /// Use exhaustive search instead of dynamic programming.
        #[arg(long)]
        bruteforce: bool,
    },
    /// Train an imitation recommender on optimal labels or on exported human trials.
    Train {
        /// Instance file (labels are the optima) or, with --trials, an NDJSON trial export.
        input: PathBuf,
        #[arg(long)]
        trials: bool,
        /// Training passes over the data.
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value = "m1")]
        label: String,
    },
    /// Fit a noisy-greedy recommender to a target mean utility.
    Calibrate {
        /// Target economic utility; defaults to the arm's treatment mean.
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value = "q1")]
        arm: MlArm,
        #[arg(long, default_value_t = 2000)]
        instances: usize,
    },
    /// Mean utility of a saved recommender on fresh instances.
    Evaluate {
        model: PathBuf,
        #[arg(long, default_value_t = 2000)]
        instances: usize,
        #[arg(long, default_value = "economic")]
        kind: UtilityKind,
    },
    /// Collaborative learning path on a CCF bundle (the empirical one by default).
    SimulateClp {
        #[arg(long)]
        ccf: Option<PathBuf>,
        #[arg(long, default_value_t = 0.717)]
        start: f64,
        #[arg(long, default_value_t = DEFAULT_EPSILON_HAT)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Imperfect learner `u -> slope * u + intercept`.
        #[arg(long, default_value_t = 1.0)]
        slope: f64,
        #[arg(long, default_value_t = 0.0)]
        intercept: f64,
    },
    /// Stable points of a CCF bundle.
    FixedPoints {
        #[arg(long)]
        ccf: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPSILON_HAT)]
        epsilon: f64,
    },
    /// Closed performative loop with a simulated human.
    RunLoop {
        #[command(flatten)]
        human: HumanArg,
        /// Initial recommender file; noisy greedy with --sigma when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.55)]
        sigma: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 500)]
        per_epoch: usize,
        /// Training passes per deployment epoch.
        #[arg(long, default_value_t = 20)]
        train_epochs: usize,
        #[arg(long, default_value = "economic")]
        kind: UtilityKind,
    },
    /// Run complete study sessions with a simulated participant; writes NDJSON trials.
    SimulateStudy {
        #[command(flatten)]
        human: HumanArg,
        #[command(flatten)]
        models: ModelArgs,
        /// Arm to run (repeatable).
        #[arg(long = "arm", required = true)]
        arms: Vec<MlArm>,
        #[arg(long, default_value_t = 20)]
        sessions: usize,
    },
    /// Estimate CCF points with clustered standard errors from NDJSON trials.
    EstimateCcf {
        input: PathBuf,
        #[arg(long, default_value = "economic")]
        kind: UtilityKind,
        #[arg(long)]
        arm: Option<MlArm>,
        #[arg(long)]
        bonus: Option<Bonus>,
    },
    /// Per-arm follow rate and inferior-deviation rate as CSV.
    Decompose {
        input: PathBuf,
    },
    /// Flatten NDJSON trials or an event log into per-trial CSV.
    ExportCsv {
        input: PathBuf,
        /// Input is a raw event log rather than an NDJSON trial export.
        #[arg(long)]
        events: bool,
        #[arg(long)]
        arm: Option<MlArm>,
        #[arg(long)]
        bonus: Option<Bonus>,
        /// Include practice trials.
        #[arg(long)]
        all_phases: bool,
    },
    /// Run the acceptance criteria (all, or those named).
    Verify { criteria: Vec<String> },
    /// Serve the study API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Event log file, replayed on start and appended to.
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
    },
}

#[derive(Args)]
struct HumanArg {
    /// Human model: a TOML file or a bare kind name such as best_of_two.
    #[arg(long, default_value = "best_of_two")]
    human: String,
}

impl HumanArg {
    fn load(&self) -> anyhow::Result<HumanModel> {
        let path = Path::new(&self.human);
        let model = if path.exists() {
            HumanModel::load(path)?
        } else {
            let model = HumanModel::from_toml(&format!("kind = \"{}\"", self.human))
                .with_context(|| format!("{:?} is neither a file nor a model kind", self.human))?;
            model.validate()?;
            model
        };
        Ok(model)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Recommender for an arm as ARM=FILE (repeatable). Arms without one are calibrated.
    #[arg(long = "model", value_parser = parse_model_arg)]
    models: Vec<(MlArm, PathBuf)>,
    /// Instances used to calibrate arms without a model file.
    #[arg(long, default_value_t = 1000)]
    calibration_instances: usize,
}

fn parse_model_arg(s: &str) -> Result<(MlArm, PathBuf), String> {
    let (arm, path) = s.split_once('=').ok_or("expected ARM=FILE")?;
    let arm: MlArm = arm.parse().map_err(|e| format!("{e}"))?;
    if arm == MlArm::None {
        return Err("the none arm has no recommender".into());
    }
    Ok((arm, PathBuf::from(path)))
}

impl ModelArgs {
    fn config(&self, seed: u64) -> anyhow::Result<StudyConfig> {
        let mut recs: BTreeMap<MlArm, Recommender> = BTreeMap::new();
        for (arm, path) in &self.models {
            recs.insert(*arm, load_recommender(path)?);
        }
        if recs.len() < MlArm::MODELS.len() {
            let calibrated = StudyConfig::calibrated(self.calibration_instances, seed)?;
            for (arm, rec) in calibrated.recommenders {
                recs.entry(arm).or_insert(rec);
            }
        }
        Ok(StudyConfig::new(recs))
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn output(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_recommender(path: &Path) -> anyhow::Result<Recommender> {
    read_recommender(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_ccf(path: &Option<PathBuf>) -> anyhow::Result<Ccf> {
    let Some(path) = path else { return Ok(Ccf::empirical()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ccf = Ccf::parse(&text)?;
    for w in ccf.mark_unverified_arms() {
        eprintln!("warning: {w}");
    }
    Ok(ccf)
}

fn load_trials(path: &Path) -> anyhow::Result<Vec<TrialExport>> {
    read_ndjson(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let seed = cli.seed;
    let mut out = output(&cli.out)?;
    match cli.command {
        Command::Generate { count, items, w_min, w_max } => {
            let params = GeneratorParams { items, w_min, w_max };
            write_instances(&mut out, &params.generate_batch(count, seed)?)?;
        }
        Command::Solve { input, bruteforce } => {
            writeln!(out, "index,capacity,optimal_value,total_weight,selection")?;
            for (k, x) in read_instances(open(&input)?)?.iter().enumerate() {
                let s = if bruteforce { solve_bruteforce(x)? } else { solve_exact(x)? };
                writeln!(
                    out,
                    "{k},{},{},{},{}",
                    x.capacity(),
                    s.total_value(),
                    s.total_weight(),
                    s.to_bitstring()
                )?;
            }
        }
        Command::Train { input, trials, epochs, label } => {
            let data = if trials {
                collab_core::study::epoch_dataset(&load_trials(&input)?, 0)?
            } else {
                let pairs = read_instances(open(&input)?)?
                    .into_iter()
                    .map(|x| solve_exact(&x).map(|y| (x, y)))
                    .collect::<Result<Vec<_>, _>>()?;
                LabeledDataset::new(pairs, 0)?
            };
            let cfg = TrainingConfig { epochs, ..TrainingConfig::default() };
            let model = train_imitation(&data, &cfg, label, seed)?;
            eprintln!(
                "trained on {} pairs, loss {:.4} -> {:.4}",
                data.len(),
                model.initial_loss(),
                model.final_loss()
            );
            write_recommender(&mut out, &model.recommender)?;
        }
        Command::Calibrate { target, arm, instances } => {
            let Some(target) = target.or(arm.target_utility()) else {
                bail!("arm none has no target; pass --target");
            };
            let eval = SolvedInstance::solve_all(GeneratorParams::default().generate_batch(instances, seed)?)?;
            let cal = calibrate_to_target(target, &eval, seed, arm.name(), CalibrationOptions::default())?;
            eprintln!(
                "{arm}: sigma {:.6}, mean {:.4}, sd {:.4} over {instances} instances",
                cal.sigma, cal.achieved.mean, cal.achieved.sd
            );
            write_recommender(&mut out, &cal.recommender)?;
        }
        Command::Evaluate { model, instances, kind } => {
            let rec = load_recommender(&model)?;
            let eval = SolvedInstance::solve_all(GeneratorParams::default().generate_batch(instances, seed)?)?;
            let m = evaluate_recommender(&rec, &eval, kind, seed)?;
            writeln!(out, "recommender,kind,instances,mean,sd")?;
            writeln!(out, "{},{kind},{},{},{}", rec.label, m.count, m.mean, m.sd)?;
        }
        Command::SimulateClp { ccf, start, epsilon, epochs, slope, intercept } => {
            let ccf = load_ccf(&ccf)?;
            let learner = if slope == 1.0 && intercept == 0.0 {
                LearnerMap::Perfect
            } else {
                LearnerMap::AffineTilt { slope, intercept }
            };
            let path = simulate_clp(&ccf, start, epochs, epsilon, learner)?;
            match path.stable_at {
                Some(t) => eprintln!("stable at epoch {t}, utility {:.4}", path.final_utility()),
                None => eprintln!("not stable after {epochs} epochs, utility {:.4}", path.final_utility()),
            }
            path.write_csv(&mut out)?;
        }
        Command::FixedPoints { ccf, epsilon } => {
            let ccf = load_ccf(&ccf)?;
            writeln!(out, "# stability from the CCF slope: attracting |s| < 1, repelling |s| > 1")?;
            writeln!(out, "utility,stability")?;
            for fp in find_fixed_points(&ccf, epsilon) {
                writeln!(out, "{},{:?}", fp.utility, fp.stability)?;
            }
        }
        Command::RunLoop { human, model, sigma, epochs, per_epoch, train_epochs, kind } => {
            let human = human.load()?;
            let rec0 = match model {
                Some(p) => load_recommender(&p)?,
                None => Recommender::noisy_greedy("m0", sigma),
            };
            let cfg = TrainingConfig { epochs: train_epochs, ..TrainingConfig::default() };
            let trace = run_performative_loop(&rec0, &human, epochs, per_epoch, &cfg, kind, seed)?;
            trace.write_csv(&mut out)?;
        }
        Command::SimulateStudy { human, models, arms, sessions } => {
            let human = human.load()?;
            let trials = simulate_study_log(models.config(seed)?, &arms, &human, sessions, seed)?;
            write_ndjson(&mut out, &trials)?;
        }
        Command::EstimateCcf { input, kind, arm, bonus } => {
            let trials: Vec<_> = load_trials(&input)?
                .into_iter()
                .filter(|t| arm.is_none_or(|a| a == t.treatment.ml_arm))
                .filter(|t| bonus.is_none_or(|b| b == t.treatment.bonus))
                .collect();
            let est = estimate_ccf_from_trials(&trials, kind)?;
            for w in &est.warnings {
                eprintln!("warning: {w}");
            }
            writeln!(out, "{SE_NOTE}")?;
            write!(out, "{}", points_to_text(&est.points))?;
        }
        Command::Decompose { input } => {
            writeln!(out, "arm,trials,follow_rate,inferior_rate")?;
            for d in follow_ignore_decomposition(&load_trials(&input)?)? {
                let inferior = d.inferior_rate.map(|r| r.to_string()).unwrap_or_default();
                writeln!(out, "{},{},{},{inferior}", d.arm, d.trials, d.follow_rate)?;
            }
        }
        Command::ExportCsv { input, events, arm, bonus, all_phases } => {
            let filter = ExportFilter {
                arm,
                bonus,
                phase: (!all_phases).then_some(TrialPhase::Main),
                ..ExportFilter::default()
            };
            let trials = if events {
                trials_from_events(&read_jsonl(open(&input)?)?, &filter)?
            } else {
                load_trials(&input)?
                    .into_iter()
                    .filter(|t| arm.is_none_or(|a| a == t.treatment.ml_arm))
                    .filter(|t| bonus.is_none_or(|b| b == t.treatment.bonus))
                    .filter(|t| all_phases || t.phase == TrialPhase::Main)
                    .collect()
            };
            write_trial_csv(&mut out, &trials)?;
        }
        Command::Verify { criteria } => {
            let mut failed = 0;
            let mut ran = 0;
            for (name, f) in verify::ALL {
                if !criteria.is_empty() && !criteria.iter().any(|c| c == name) {
                    continue;
                }
                let r = f();
                writeln!(out, "{r}")?;
                out.flush()?;
                ran += 1;
                failed += usize::from(!r.passed);
            }
            if ran == 0 {
                bail!("no criterion matches {criteria:?}");
            }
            writeln!(out, "{} passed, {failed} failed", ran - failed)?;
            out.flush()?;
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Serve { addr, log, models } => {
            let config = models.config(seed)?;
            let svc = StudyService::new(config, EventLog::open(&log)?, Arc::new(SystemClock))?;
            eprintln!("{} sessions replayed, listening on {addr}", svc.session_ids().len());
            tokio::runtime::Runtime::new()?.block_on(collab_server::serve(
                Arc::new(svc),
                addr,
                Duration::from_secs(1),
            ))?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
