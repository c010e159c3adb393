use std::fmt::{Debug, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airside::fusion::{fuse, FusionConfig, FusionScene, MinimizeMode};
use airside::geometry::{Footprint, Polygon, Pose2D, ReferencePath};
use airside::iahrl::{train, ActMode, AttentionPolicy, PolicyConfig, TrainConfig};
use airside::intention::{
    infer, AircraftEvidence, Beacon, GseState, Intention, IntentionModel, MotionState, RampAgent, Sample,
    SurroundingEvidence,
};
use airside::occlusion::{
    compute_occluded_regions, derive_velocity_constraints, ConstraintConfig, OcclusionHypothesis, Sensor,
};
use airside::par::{with_workers, Execution};
use airside::sim::{
    evaluate, generate_scenario, metrics_csv, run_with, summary_csv, MetricsRow, MetricsTable, Planner, Scenario,
    ScenarioKind, ScenarioParams, StackConfig,
};
use airside::spline::{
    check_recoverable, init_from_reference, optimize, KinodynamicLimits, OptimizationWeights, SplineError, World,
};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "airside",
    version,
    about = "Airfield ground-vehicle perception, planning and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge LiDAR over-segments using camera boxes.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        /// FusionConfig JSON; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit or query the aircraft intention classifier.
    Intent {
        #[command(subcommand)]
        command: IntentCommand,
    },
    /// Occluded regions and the resulting speed caps along a path.
    Risk {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a B-spline trajectory.
    Plan {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the optimization report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the behavior-selection policy.
    Train {
        /// TrainConfig JSON; defaults apply when absent.
        #[arg(long)]
        hyper: Option<PathBuf>,
        /// PolicyConfig JSON; the action count is taken from the lattice.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        stack: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run a batch of episodes and tabulate the outcomes.
    Eval {
        /// Policy model; the rule planner runs when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Act::Greedy)]
        act: Act,
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        kind: Option<ScenarioKind>,
        /// Scenario files to run instead of generated ones.
        #[arg(long, num_args = 1..)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Episode i uses scenario seed `seed + i`.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        stack: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run one scenario.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Seeds the episode's random streams.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Act::Greedy)]
        act: Act,
        #[arg(long, alias = "config")]
        stack: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON, one record per step.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a scenario file.
    ScenarioGen {
        #[arg(long)]
        kind: ScenarioKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum IntentCommand {
    /// Fit smoothed frequency tables from a labeled CSV with columns
    /// motion_state, beacon, gse_state, ramp_agent, intention.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior over intentions for one evidence tuple.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        motion_state: MotionState,
        #[arg(long)]
        beacon: Beacon,
        #[arg(long)]
        gse_state: GseState,
        #[arg(long)]
        ramp_agent: RampAgent,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Icm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Act {
    Greedy,
    Sample,
}

impl From<Act> for ActMode {
    fn from(a: Act) -> Self {
        match a {
            Act::Greedy => ActMode::Greedy,
            Act::Sample => ActMode::Sample,
        }
    }
}

#[derive(Debug)]
enum Failure {
    /// Bad input files or arguments.
    Config(String),
    /// The computation itself failed.
    Domain(String),
}

impl Failure {
    fn domain<E: Debug + Display>(module: &str, e: E) -> Self {
        Failure::Domain(format!("{module}::{}: {e}", variant(&e)))
    }

    fn config<E: Debug + Display>(module: &str, e: E) -> Self {
        Failure::Config(format!("{module}::{}: {e}", variant(&e)))
    }
}

fn variant<E: Debug>(e: &E) -> String {
    format!("{e:?}")
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect()
}

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| load(p))
}

/// Writes through a temporary file in the destination directory so readers
/// never see a partial file.
fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Failure::Domain(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Failure::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    if let Err(e) = fs::write(&tmp, data).and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(io(e));
    }
    Ok(())
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn execution(workers: usize) -> Result<Execution> {
    match workers {
        0 => Err(Failure::Config("--workers must be at least 1".into())),
        1 => Ok(Execution::Sequential),
        _ => Ok(Execution::Parallel),
    }
}

fn load_stack(path: Option<&PathBuf>) -> Result<StackConfig> {
    let stack: StackConfig = load_or_default(path)?;
    stack.validate().map_err(|e| Failure::config("SimError", e))?;
    Ok(stack)
}

fn load_policy(path: &Path) -> Result<AttentionPolicy> {
    AttentionPolicy::from_json(&read(path)?).map_err(|e| Failure::config("IahrlError", e))
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::from_json(&read(path)?).map_err(|e| Failure::config("SimError", e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRow {
    motion_state: String,
    beacon: String,
    gse_state: String,
    ramp_agent: String,
    intention: String,
}

impl SampleRow {
    /// Categories are matched case-insensitively.
    fn parse(&self) -> std::result::Result<Sample, String> {
        Ok(Sample {
            aircraft: AircraftEvidence {
                motion_state: self.motion_state.parse()?,
                beacon: self.beacon.parse()?,
            },
            surrounding: SurroundingEvidence {
                gse_state: self.gse_state.parse()?,
                ramp_agent: self.ramp_agent.parse()?,
            },
            intention: self.intention.parse::<Intention>()?,
        })
    }
}

/// Input of `risk`. Sensor and hypothesis default to the simulator stack's.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskScene {
    ego: Pose2D,
    path: ReferencePath,
    #[serde(default)]
    obstacles: Vec<Polygon>,
    sensor: Option<Sensor>,
    hypothesis: Option<OcclusionHypothesis>,
    constraints: ConstraintConfig,
}

/// Input of `plan`. The initial spline follows `path` from `start` to
/// `goal`; `recover_from` additionally asks whether that pose can rejoin it.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanProblem {
    path: ReferencePath,
    start: Pose2D,
    goal: Pose2D,
    #[serde(default)]
    obstacles: Vec<Polygon>,
    footprint: Footprint,
    limits: KinodynamicLimits,
    #[serde(default)]
    weights: OptimizationWeights,
    n_ctrl: usize,
    duration: f64,
    recover_from: Option<Pose2D>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse {
            scene,
            config,
            mode,
            out,
        } => {
            let scene: FusionScene = load(&scene)?;
            let mut cfg: FusionConfig = load_or_default(config.as_ref())?;
            if let Some(m) = mode {
                cfg.mode = match m {
                    Mode::Exact => MinimizeMode::Exact,
                    Mode::Icm => MinimizeMode::Icm,
                };
            }
            let output = fuse(&scene, &cfg).map_err(|e| Failure::domain("FusionError", e))?;
            emit(out.as_ref(), &json(&output))
        }
        Command::Intent { command } => match command {
            IntentCommand::Fit { data, alpha, out } => {
                let text = read(&data)?;
                let mut reader = csv::ReaderBuilder::new()
                    .trim(csv::Trim::All)
                    .from_reader(text.as_bytes());
                let mut samples = Vec::new();
                for row in reader.deserialize::<SampleRow>() {
                    let bad = |e: String| Failure::Config(format!("{}: {e}", data.display()));
                    samples.push(row.map_err(|e| bad(e.to_string()))?.parse().map_err(bad)?);
                }
                let model = IntentionModel::fit(&samples, alpha).map_err(|e| Failure::domain("IntentionError", e))?;
                emit(out.as_ref(), &json(&model))
            }
            IntentCommand::Infer {
                model,
                motion_state,
                beacon,
                gse_state,
                ramp_agent,
                out,
            } => {
                let model: IntentionModel = load(&model)?;
                model.validate().map_err(|e| Failure::config("IntentionError", e))?;
                let report = infer(
                    &model,
                    &AircraftEvidence { motion_state, beacon },
                    &SurroundingEvidence { gse_state, ramp_agent },
                )
                .map_err(|e| Failure::domain("IntentionError", e))?;
                emit(out.as_ref(), &json(&report))
            }
        },
        Command::Risk { scene, out } => {
            let scene: RiskScene = load(&scene)?;
            let defaults = StackConfig::default();
            let sensor = scene.sensor.unwrap_or(defaults.sensor);
            let hyp = scene.hypothesis.unwrap_or(defaults.hypothesis);
            let err = |e| Failure::domain("OcclusionError", e);
            let regions = compute_occluded_regions(&scene.ego, &sensor, &scene.obstacles).map_err(err)?;
            let profile = derive_velocity_constraints(&regions, &hyp, &scene.path, &scene.constraints).map_err(err)?;
            emit(out.as_ref(), &json(&profile))
        }
        Command::Plan { problem, out, report } => {
            let p: PlanProblem = load(&problem)?;
            let err = |e| Failure::domain("SplineError", e);
            let init = init_from_reference(&p.path, &p.start, &p.goal, p.n_ctrl, p.duration).map_err(err)?;
            let world = World::new(p.obstacles);
            let (traj, rep) = match optimize(&init, &world, &p.footprint, &p.limits, &p.weights) {
                Ok(r) => r,
                Err(SplineError::NotConverged(nc)) => {
                    // keep the best iterate so it can be inspected
                    let nc = *nc;
                    if let Some(path) = report.as_ref() {
                        write_atomic(path, json(&nc.report).as_bytes())?;
                    }
                    emit(out.as_ref(), &json(&serde_json::json!({ "trajectory": nc.trajectory })))?;
                    return Err(Failure::Domain(format!(
                        "SplineError::NotConverged: optimizer did not converge after {} iterations",
                        nc.report.iterations
                    )));
                }
                Err(e) => return Err(err(e)),
            };
            let mut doc = serde_json::json!({ "trajectory": traj });
            if let Some(pose) = p.recover_from {
                doc["recoverable"] =
                    check_recoverable(&pose, &p.path, &world, &p.footprint, &p.limits, &p.weights).into();
            }
            if let Some(path) = report.as_ref() {
                write_atomic(path, json(&rep).as_bytes())?;
            }
            emit(out.as_ref(), &json(&doc))
        }
        Command::Train {
            hyper,
            policy,
            stack,
            seed,
            model_out,
            curve,
            workers,
        } => {
            let exec = execution(workers)?;
            let mut cfg: TrainConfig = load_or_default(hyper.as_ref())?;
            cfg.seed = seed;
            cfg.validate().map_err(|e| Failure::config("IahrlError", e))?;
            let stack = load_stack(stack.as_ref())?;
            let mut pcfg: PolicyConfig = load_or_default(policy.as_ref())?;
            let probe = generate_scenario(cfg.kind, &cfg.params, cfg.episode_seed(0))
                .map_err(|e| Failure::config("SimError", e))?;
            pcfg.n_actions = stack.lattice.candidate_count(probe.ego.limits.v_max);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let initial = AttentionPolicy::new(pcfg, &mut rng).map_err(|e| Failure::config("IahrlError", e))?;
            let result = with_workers(workers, || train(initial, &stack, &cfg, exec))
                .map_err(|e| Failure::domain("SimError", e))?;
            write_atomic(&model_out, result.policy.to_json().as_bytes())?;
            if let Some(path) = curve.as_ref() {
                write_atomic(path, result.curve_csv().as_bytes())?;
            }
            eprintln!(
                "trained {} episodes, {} environment steps",
                result.episodes, result.env_steps
            );
            Ok(())
        }
        Command::Eval {
            model,
            act,
            kind,
            scenario,
            params,
            episodes,
            seed,
            stack,
            out,
            summary,
            workers,
        } => {
            let exec = execution(workers)?;
            let stack = load_stack(stack.as_ref())?;
            let policy = model.as_deref().map(load_policy).transpose()?;
            let scenarios = if scenario.is_empty() {
                let params: ScenarioParams = load_or_default(params.as_ref())?;
                let kind = kind.expect("clap requires --kind without --scenario");
                (0..episodes)
                    .map(|i| generate_scenario(kind, &params, seed.wrapping_add(i as u64)))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Failure::config("SimError", e))?
            } else {
                let mut v = Vec::with_capacity(scenario.len());
                for (i, p) in scenario.iter().enumerate() {
                    let mut sc = load_scenario(p)?;
                    sc.seed = seed.wrapping_add(i as u64);
                    v.push(sc);
                }
                v
            };
            let planner = match &policy {
                Some(p) => Planner::Policy(p, act.into()),
                None => Planner::Rule,
            };
            let table = with_workers(workers, || evaluate(&scenarios, &stack, planner, exec))
                .map_err(|e| Failure::domain("SimError", e))?;
            write_atomic(&out, metrics_csv(&table).as_bytes())?;
            if let Some(path) = summary.as_ref() {
                write_atomic(path, summary_csv(&table).as_bytes())?;
            }
            Ok(())
        }
        Command::Sim {
            scenario,
            seed,
            model,
            act,
            stack,
            out,
            trace,
            workers,
        } => {
            execution(workers)?;
            let mut stack = load_stack(stack.as_ref())?;
            stack.record_trace |= trace.is_some();
            let policy = model.as_deref().map(load_policy).transpose()?;
            let mut sc = load_scenario(&scenario)?;
            sc.seed = seed;
            let planner = match &policy {
                Some(p) => Planner::Policy(p, act.into()),
                None => Planner::Rule,
            };
            let r =
                with_workers(workers, || run_with(&sc, &stack, planner)).map_err(|e| Failure::domain("SimError", e))?;
            let table = MetricsTable {
                rows: vec![MetricsRow {
                    scenario_id: 0,
                    seed,
                    outcome: r.outcome,
                    steps: r.steps,
                    discomfort: r.discomfort,
                    min_clearance: r.min_clearance,
                }],
                summary: Vec::new(),
            };
            if let Some(path) = trace.as_ref() {
                let mut lines = String::new();
                for rec in &r.trace {
                    lines.push_str(&serde_json::to_string(rec).expect("serializable trace"));
                    lines.push('\n');
                }
                write_atomic(path, lines.as_bytes())?;
            }
            write_atomic(&out, metrics_csv(&table).as_bytes())?;
            if let Some(d) = &r.diagnostics {
                eprintln!("{d}");
            }
            Ok(())
        }
        Command::ScenarioGen {
            kind,
            seed,
            params,
            out,
        } => {
            let params: ScenarioParams = load_or_default(params.as_ref())?;
            let sc = generate_scenario(kind, &params, seed).map_err(|e| Failure::config("SimError", e))?;
            let mut text = sc.to_json();
            text.push('\n');
            emit(out.as_ref(), &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
