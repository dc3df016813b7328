use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stepstone::baseline::{self, BaselineParams};
use stepstone::dataset::{self, DatasetGenParams};
use stepstone::feasibility::{BuiltinOracle, ExternalOracle, FeasibilityOracle, GaitSpec, OracleParams, PlanDocument, VerdictDocument};
use stepstone::harness::{self, BenchConfig, PlannerSelector};
use stepstone::kinematics::Stance;
use stepstone::search::{self, PlanResult, PlannerConfig, SearchParams};
use stepstone::session::{self, EndpointConfig, SessionParams};
use stepstone::terrain::{self, GoalSampleParams, GoalSpec, StoneId, TerrainGenParams, TerrainMap};
use stepstone::{rng, Error, NUM_FEET};
use stepstone_server::{Server, ServerConfig};

/// Contact planning for quadrupeds on stepping stones.
#[derive(Parser)]
#[command(name = "stepstone", version)]
struct Cli {
    /// Master seed. Overrides the seed in --params.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Terrain file to use instead of generating one.
    #[arg(long, global = true)]
    terrain: Option<PathBuf>,
    /// JSON parameter file for the subcommand; missing fields take defaults.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Output file, or directory for `dataset` and `serve --record`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Gait. Overrides the gait in --params.
    #[arg(long, global = true, value_enum)]
    gait: Option<GaitArg>,
    /// `builtin`, or `external:<shell command>` reading a plan document on
    /// stdin and printing a verdict document.
    #[arg(long, global = true, default_value = "builtin")]
    oracle: String,
    /// Per-call timeout of an external oracle, in milliseconds.
    #[arg(long, global = true, default_value_t = 10_000)]
    oracle_timeout_ms: u64,
    /// Record measured wall times instead of zeros.
    #[arg(long, global = true)]
    wall_time: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GaitArg {
    Jump,
    Trot,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Mcts,
    Naive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a terrain file. Params: terrain generation parameters.
    GenEnv,
    /// Plan from the start stance to a goal and write the plan document.
    /// Params: `terrain`, `goals`, `planner`, `oracle`, `baseline`.
    Plan {
        /// Goal stone ids, one per foot (FL FR HL HR); sampled when absent.
        #[arg(long, value_delimiter = ',')]
        goal: Option<Vec<StoneId>>,
        #[arg(long, value_enum, default_value = "mcts")]
        planner: PlannerArg,
    },
    /// Run benchmark episodes and write one CSV row per planner and episode.
    /// Params: benchmark configuration.
    Bench,
    /// Paired MCTS vs naive comparison. Writes the CSV to --out and prints
    /// the comparison as JSON.
    Compare,
    /// Generate a supervised dataset into the --out directory.
    Dataset,
    /// Serve the session protocol. Params: default session parameters.
    Serve {
        /// TCP address for newline-delimited JSON.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// HTTP address for request/response clients.
        #[arg(long)]
        http: Option<String>,
        /// Directory receiving per-connection message and event logs.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Feed a recorded message log through a fresh session and write the
    /// resulting events.
    Replay {
        log: PathBuf,
        /// Event log to compare against; a mismatch exits with 3.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Evaluate a plan document with the selected oracle and print the
    /// verdict document. Reads stdin when no file is given.
    Check { plan: Option<PathBuf> },
}

/// Parameters of the `plan` subcommand.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlanParams {
    terrain: TerrainGenParams,
    goals: GoalSampleParams,
    planner: PlannerConfig,
    oracle: OracleParams,
    baseline: BaselineParams,
}

/// Printed next to the plan document.
#[derive(Serialize)]
struct PlanReport<'a> {
    planner: &'a str,
    seed: u64,
    success: bool,
    plan_length: Option<usize>,
    stats: &'a search::SearchStats,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_params<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_terrain(path: &Path) -> Result<TerrainMap, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    TerrainMap::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Outcome {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => match io::stdout().write_all(bytes) {
            // A closed pipe (`stepstone ... | head`) is not a failure.
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        },
    }
    Ok(())
}

fn say(line: &str) -> Outcome {
    write_out(None, format!("{line}\n").as_bytes())
}

impl Cli {
    fn gait_or(&self, gait: GaitSpec) -> GaitSpec {
        match self.gait {
            Some(GaitArg::Jump) => GaitSpec::jump(),
            Some(GaitArg::Trot) => GaitSpec::trot(),
            None => gait,
        }
    }

    fn oracle(&self, params: &OracleParams) -> Result<Arc<dyn FeasibilityOracle>, Failure> {
        if self.oracle == "builtin" {
            return Ok(Arc::new(BuiltinOracle::new(params.clone())));
        }
        match self.oracle.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Arc::new(ExternalOracle::new(cmd, Duration::from_millis(self.oracle_timeout_ms)))),
            _ => Err(Failure::Config(format!("--oracle must be builtin or external:<cmd>, got {:?}", self.oracle))),
        }
    }

    fn builtin_only(&self, what: &str) -> Outcome {
        if self.oracle != "builtin" {
            return Err(Failure::Config(format!("{what} supports only the builtin oracle")));
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::GenEnv => gen_env(&cli),
        Command::Plan { goal, planner } => plan(&cli, goal.as_deref(), *planner),
        Command::Bench => bench(&cli, false),
        Command::Compare => bench(&cli, true),
        Command::Dataset => make_dataset(&cli),
        Command::Serve { bind, http, record } => serve(&cli, bind, http.as_deref(), record.as_deref()),
        Command::Replay { log, expect } => replay(&cli, log, expect.as_deref()),
        Command::Check { plan } => check(&cli, plan.as_deref()),
    }
}

fn gen_env(cli: &Cli) -> Outcome {
    let params: TerrainGenParams = load_params(cli.params.as_deref())?;
    let map = terrain::generate_terrain(&params, cli.seed.unwrap_or(0))?;
    let mut text = map.to_json()?;
    text.push('\n');
    write_out(cli.out.as_deref(), text.as_bytes())
}

fn plan(cli: &Cli, goal: Option<&[StoneId]>, planner: PlannerArg) -> Outcome {
    let mut params: PlanParams = load_params(cli.params.as_deref())?;
    params.planner.gait = cli.gait_or(params.planner.gait.clone());
    let seed = cli.seed.unwrap_or(params.planner.search.seed);
    let map = match &cli.terrain {
        Some(p) => load_terrain(p)?,
        None => terrain::generate_terrain(&params.terrain, seed)?,
    };
    let start = terrain::start_stance(&map)?;
    let kin = &params.planner.kinematics;
    let goal = match goal {
        Some(ids) => {
            let ids: [StoneId; NUM_FEET] = ids.try_into().map_err(|_| Failure::Config("--goal takes four stone ids".into()))?;
            GoalSpec::from_stones(&map, ids)?
        }
        None => terrain::sample_goal(&map, &start, &params.goals, kin, rng::derive_seed(seed, rng::TAG_GOAL, 0))?,
    };
    let oracle = cli.oracle(&params.oracle)?;
    let gait = params.planner.gait.clone();
    let (name, mut result): (&str, PlanResult) = match planner {
        PlannerArg::Mcts => {
            let config = PlannerConfig { search: SearchParams { seed, ..params.planner.search.clone() }, ..params.planner.clone() };
            let r = match search::plan(&map, &start, &goal, &config, oracle.as_ref()) {
                Err(Error::DeadRoot) => return Err(Failure::Runtime("the start stance has no legal action".into())),
                other => other?,
            };
            ("mcts", r)
        }
        PlannerArg::Naive => {
            let r = baseline::naive_rollout(&map, &start, &goal, &params.baseline, kin, &gait, oracle.as_ref())?;
            ("naive", r.result)
        }
    };
    if !cli.wall_time {
        result.stats.wall_ms = 0.0;
    }
    let report = PlanReport { planner: name, seed, success: result.success(), plan_length: result.first().map(|p| p.len()), stats: &result.stats };
    let report = serde_json::to_string(&report).expect("report serializes");
    let Some(found) = result.first() else {
        eprintln!("{report}");
        return Err(Failure::Runtime("no feasible plan found".into()));
    };
    let mut doc = PlanDocument::new(&map, &gait, &start, &found.actions)?;
    doc.goal = Some(goal.stone_ids);
    let mut text = serde_json::to_string_pretty(&doc).expect("document serializes");
    text.push('\n');
    write_out(cli.out.as_deref(), text.as_bytes())?;
    if cli.out.is_some() {
        say(&report)?;
    } else {
        eprintln!("{report}");
    }
    Ok(())
}

fn bench(cli: &Cli, compare: bool) -> Outcome {
    let mut config: BenchConfig = load_params(cli.params.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.gait = cli.gait_or(config.gait.clone());
    config.record_wall_time |= cli.wall_time;
    if compare {
        config.planner = PlannerSelector::Both;
    }
    if cli.terrain.is_some() {
        return Err(Failure::Config("bench generates one terrain per episode; --terrain is not accepted".into()));
    }
    config.validate()?;
    let oracle = cli.oracle(&config.oracle)?;
    let mut csv = Vec::new();
    let summary = if compare {
        let (rows, cmp) = harness::compare_planners(&config, oracle.as_ref())?;
        harness::write_csv(&rows, &mut csv)?;
        serde_json::to_string_pretty(&cmp).expect("comparison serializes")
    } else {
        let rows = harness::run_benchmark(&config, oracle.as_ref())?;
        harness::write_csv(&rows, &mut csv)?;
        serde_json::to_string_pretty(&harness::summarize(&rows)).expect("summary serializes")
    };
    write_out(cli.out.as_deref(), &csv)?;
    if cli.out.is_some() {
        say(&summary)?;
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn make_dataset(cli: &Cli) -> Outcome {
    cli.builtin_only("dataset")?;
    if cli.terrain.is_some() {
        return Err(Failure::Config("dataset generates its own terrains; --terrain is not accepted".into()));
    }
    let mut params: DatasetGenParams = load_params(cli.params.as_deref())?;
    if let Some(seed) = cli.seed {
        params.seed = seed;
    }
    params.gait = cli.gait_or(params.gait.clone());
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
    let manifest = dataset::generate_dataset(&params, &dir)?;
    say(&serde_json::to_string(&manifest.counts).expect("counts serialize"))?;
    Ok(())
}

fn endpoint_config(cli: &Cli, defaults: SessionParams) -> Result<EndpointConfig, Failure> {
    let terrain = cli.terrain.as_deref().map(load_terrain).transpose()?;
    let oracle = if cli.oracle == "builtin" { None } else { Some(cli.oracle(&defaults.oracle)?) };
    Ok(EndpointConfig { terrain, oracle, defaults })
}

fn session_defaults(cli: &Cli) -> Result<SessionParams, Failure> {
    let mut defaults: SessionParams = load_params(cli.params.as_deref())?;
    defaults.gait = cli.gait_or(defaults.gait.clone());
    defaults.validate()?;
    Ok(defaults)
}

fn serve(cli: &Cli, bind: &str, http: Option<&str>, record: Option<&Path>) -> Outcome {
    let endpoint = endpoint_config(cli, session_defaults(cli)?)?;
    let config = ServerConfig { endpoint, record_dir: record.map(Path::to_path_buf).or_else(|| cli.out.clone()) };
    let server = Server::start(bind, http, config).map_err(|e| Failure::Runtime(format!("bind: {e}")))?;
    eprintln!("listening on tcp://{}", server.tcp_addr());
    if let Some(addr) = server.http_addr() {
        eprintln!("listening on http://{addr}");
    }
    let (tx, rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    let _ = rx.recv();
    eprintln!("shutting down");
    server.shutdown();
    Ok(())
}

fn replay(cli: &Cli, log: &Path, expect: Option<&Path>) -> Outcome {
    let open = |p: &Path| fs::File::open(p).map(BufReader::new).map_err(|e| Failure::Config(format!("{}: {e}", p.display())));
    let entries = session::read_replay(open(log)?)?;
    let events = session::replay(&entries, endpoint_config(cli, session_defaults(cli)?)?);
    let mut out = Vec::new();
    session::write_jsonl(&events, &mut out)?;
    write_out(cli.out.as_deref(), &out)?;
    if let Some(path) = expect {
        let want = session::read_events(open(path)?)?;
        if want != events {
            let at = want.iter().zip(&events).position(|(a, b)| a != b).unwrap_or(want.len().min(events.len()));
            return Err(Failure::Runtime(format!("replay diverges from {} at event {at}", path.display())));
        }
    }
    Ok(())
}

fn check(cli: &Cli, plan: Option<&Path>) -> Outcome {
    let mut text = String::new();
    match plan {
        Some(p) => text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => {
            io::stdin().read_to_string(&mut text)?;
        }
    }
    let doc: PlanDocument = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("plan document: {e}")))?;
    let params: OracleParams = load_params(cli.params.as_deref())?;
    let map = doc.terrain_map()?;
    let stances: Vec<Stance> = match &doc.stances {
        Some(s) => s.iter().map(Stance::from).collect(),
        None => {
            let mut s = vec![Stance::from(&doc.start_stance)];
            for a in doc.action_specs() {
                let next = s.last().expect("non-empty").apply(&map, &a)?;
                s.push(next);
            }
            s
        }
    };
    let gait = cli.gait_or(doc.gait.clone());
    let verdict = cli.oracle(&params)?.evaluate(&map, &stances, &gait)?;
    let doc = VerdictDocument { feasible: verdict.feasible(), failed_step: verdict.failed_step, diagnostics: serde_json::json!({ "steps": verdict.steps }) };
    say(&serde_json::to_string(&doc).expect("verdict serializes"))?;
    Ok(())
}
