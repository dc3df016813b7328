//! Batch benchmarks: many seeded problems, one CSV row per planner and
//! episode, plus summary statistics and paired planner comparison.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baseline::{self, BaselineParams};
use crate::feasibility::{FeasibilityOracle, GaitSpec, OracleParams};
use crate::kinematics::{KinematicParams, Stance};
use crate::rng;
use crate::search::{self, PlanResult, PlannerConfig, SearchParams};
use crate::terrain::{self, GoalSampleParams, GoalSpec, TerrainGenParams, TerrainMap};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["planner", "seed", "success", "iterations_to_first", "wall_ms", "oracle_calls", "plan_length"];

/// A map with start and goal, all derived from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub seed: u64,
    pub map: TerrainMap,
    pub start: Stance,
    pub goal: GoalSpec,
}

/// Generates the map for `seed` (start stones protected), stands the robot
/// on the start stones and samples a goal with the same seed.
pub fn build_problem(terrain_params: &TerrainGenParams, goal_params: &GoalSampleParams, kin: &KinematicParams, seed: u64) -> Result<Problem> {
    let mut tp = terrain_params.clone();
    tp.protected_ids.extend(tp.start_ids());
    let map = terrain::generate_terrain(&tp, seed)?;
    let start = terrain::start_stance(&map)?;
    let goal = terrain::sample_goal(&map, &start, goal_params, kin, seed)?;
    Ok(Problem { seed, map, start, goal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Mcts,
    Naive,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Mcts => "mcts",
            PlannerKind::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerSelector {
    Mcts,
    Naive,
    Both,
}

impl PlannerSelector {
    pub fn planners(self) -> &'static [PlannerKind] {
        match self {
            PlannerSelector::Mcts => &[PlannerKind::Mcts],
            PlannerSelector::Naive => &[PlannerKind::Naive],
            PlannerSelector::Both => &[PlannerKind::Mcts, PlannerKind::Naive],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_episodes: usize,
    pub terrain: TerrainGenParams,
    pub goals: GoalSampleParams,
    pub gait: GaitSpec,
    pub search: SearchParams,
    pub kinematics: KinematicParams,
    pub oracle: OracleParams,
    pub baseline: BaselineParams,
    pub planner: PlannerSelector,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    /// Write measured wall times. Off by default so reruns are
    /// byte-identical; the column then reads 0.
    pub record_wall_time: bool,
    /// Fresh seeds tried for an episode whose map admits no goal.
    pub goal_retries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            terrain: TerrainGenParams::default(),
            goals: GoalSampleParams::default(),
            gait: GaitSpec::jump(),
            search: SearchParams::default(),
            kinematics: KinematicParams::default(),
            oracle: OracleParams::default(),
            baseline: BaselineParams::default(),
            planner: PlannerSelector::Both,
            seed: 0,
            workers: 0,
            record_wall_time: false,
            goal_retries: 32,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes < 1 {
            return Err(Error::Config("n_episodes must be at least 1".into()));
        }
        self.terrain.validate()?;
        self.gait.validate()?;
        self.search.validate()?;
        self.kinematics.validate()?;
        self.oracle.validate()?;
        self.baseline.validate()
    }

    pub fn planner_config(&self, seed: u64) -> PlannerConfig {
        PlannerConfig { search: SearchParams { seed, ..self.search.clone() }, kinematics: self.kinematics.clone(), gait: self.gait.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub planner: PlannerKind,
    pub seed: u64,
    pub success: bool,
    pub iterations_to_first: Option<u64>,
    pub wall_ms: f64,
    pub oracle_calls: u64,
    pub plan_length: Option<usize>,
}

impl BenchRow {
    fn from_result(planner: PlannerKind, seed: u64, r: &PlanResult, record_wall_time: bool) -> Self {
        Self {
            planner,
            seed,
            success: r.success(),
            iterations_to_first: r.stats.iterations_to_first,
            wall_ms: if record_wall_time { r.stats.wall_ms } else { 0.0 },
            oracle_calls: r.stats.oracle_calls,
            plan_length: r.first().map(|p| p.len()),
        }
    }
}

/// Seed of episode `index`, and of its `k`-th retry.
pub fn episode_seed(master: u64, index: usize, retry: usize) -> u64 {
    let base = rng::derive_seed(master, rng::TAG_EPISODE, index as u64);
    if retry == 0 {
        base
    } else {
        rng::derive_seed(base, rng::TAG_EPISODE, retry as u64)
    }
}

/// Problem of episode `index`, retrying with derived seeds while the map
/// admits no goal.
pub fn episode_problem(config: &BenchConfig, index: usize) -> Result<Problem> {
    let mut last = None;
    for retry in 0..=config.goal_retries {
        let seed = episode_seed(config.seed, index, retry);
        match build_problem(&config.terrain, &config.goals, &config.kinematics, seed) {
            Ok(p) => return Ok(p),
            Err(e @ Error::SamplingExhausted(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Runs one planner on a problem.
pub fn run_planner(planner: PlannerKind, problem: &Problem, config: &BenchConfig, oracle: &dyn FeasibilityOracle) -> Result<PlanResult> {
    match planner {
        PlannerKind::Mcts => match search::plan(&problem.map, &problem.start, &problem.goal, &config.planner_config(problem.seed), oracle) {
            Err(Error::DeadRoot) => Ok(PlanResult { plans: vec![], verdicts: vec![], stats: Default::default() }),
            other => other,
        },
        PlannerKind::Naive => {
            Ok(baseline::naive_rollout(&problem.map, &problem.start, &problem.goal, &config.baseline, &config.kinematics, &config.gait, oracle)?.result)
        }
    }
}

/// Maps `f` over `0..n` on a pool of `workers` threads; results come back
/// in index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = crate::dataset::worker_count(workers).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("result slots poisoned")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned").into_iter().map(|v| v.expect("every index computed")).collect()
}

/// Per-episode rows, in episode order and then planner order.
pub fn run_benchmark(config: &BenchConfig, oracle: &dyn FeasibilityOracle) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let per_episode = parallel_map(config.n_episodes, config.workers, |i| -> Result<Vec<BenchRow>> {
        let problem = episode_problem(config, i)?;
        config
            .planner
            .planners()
            .iter()
            .map(|&p| Ok(BenchRow::from_result(p, problem.seed, &run_planner(p, &problem, config, oracle)?, config.record_wall_time)))
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_episode {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.planner.name().to_string(),
            r.seed.to_string(),
            r.success.to_string(),
            r.iterations_to_first.map_or(String::new(), |v| v.to_string()),
            r.wall_ms.to_string(),
            r.oracle_calls.to_string(),
            r.plan_length.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::Config(format!("bad {what} in benchmark CSV"));
        fn opt(s: &str) -> Option<&str> {
            if s.is_empty() {
                None
            } else {
                Some(s)
            }
        }
        rows.push(BenchRow {
            planner: match field(0) {
                "mcts" => PlannerKind::Mcts,
                "naive" => PlannerKind::Naive,
                _ => return Err(bad("planner")),
            },
            seed: field(1).parse().map_err(|_| bad("seed"))?,
            success: field(2).parse().map_err(|_| bad("success"))?,
            iterations_to_first: opt(field(3)).map(str::parse).transpose().map_err(|_| bad("iterations_to_first"))?,
            wall_ms: field(4).parse().map_err(|_| bad("wall_ms"))?,
            oracle_calls: field(5).parse().map_err(|_| bad("oracle_calls"))?,
            plan_length: opt(field(6)).map(str::parse).transpose().map_err(|_| bad("plan_length"))?,
        });
    }
    Ok(rows)
}

/// Per-planner aggregate. Medians and means cover successful episodes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub planner: PlannerKind,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_iterations: Option<f64>,
    pub median_wall_ms: Option<f64>,
    pub mean_oracle_calls: Option<f64>,
    pub median_plan_length: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn summarize(rows: &[BenchRow]) -> Vec<PlannerSummary> {
    let mut planners: Vec<PlannerKind> = rows.iter().map(|r| r.planner).collect();
    planners.sort();
    planners.dedup();
    planners
        .into_iter()
        .map(|planner| {
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.planner == planner).collect();
            let ok: Vec<&BenchRow> = mine.iter().copied().filter(|r| r.success).collect();
            let mean_calls = (!ok.is_empty()).then(|| ok.iter().map(|r| r.oracle_calls as f64).sum::<f64>() / ok.len() as f64);
            PlannerSummary {
                planner,
                episodes: mine.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / mine.len() as f64,
                median_iterations: median(ok.iter().filter_map(|r| r.iterations_to_first).map(|v| v as f64).collect()),
                median_wall_ms: median(ok.iter().map(|r| r.wall_ms).collect()),
                mean_oracle_calls: mean_calls,
                median_plan_length: median(ok.iter().filter_map(|r| r.plan_length).map(|v| v as f64).collect()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// MCTS succeeded and the naive planner did not.
    Win,
    Loss,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEpisode {
    pub seed: u64,
    pub mcts: bool,
    pub naive: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub gait: String,
    pub summaries: Vec<PlannerSummary>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Counts indexed `[mcts success][naive success]`.
    pub matrix: [[usize; 2]; 2],
    pub episodes: Vec<PairedEpisode>,
}

/// Pairs up rows of the two planners by seed.
pub fn compare_rows(rows: &[BenchRow], gait: &GaitSpec) -> Comparison {
    let mut episodes = Vec::new();
    let mut matrix = [[0usize; 2]; 2];
    for m in rows.iter().filter(|r| r.planner == PlannerKind::Mcts) {
        let Some(n) = rows.iter().find(|r| r.planner == PlannerKind::Naive && r.seed == m.seed) else {
            continue;
        };
        let outcome = match (m.success, n.success) {
            (true, false) => Outcome::Win,
            (false, true) => Outcome::Loss,
            _ => Outcome::Tie,
        };
        matrix[m.success as usize][n.success as usize] += 1;
        episodes.push(PairedEpisode { seed: m.seed, mcts: m.success, naive: n.success, outcome });
    }
    let count = |o: Outcome| episodes.iter().filter(|e| e.outcome == o).count();
    Comparison {
        gait: serde_json::to_value(gait.name).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        summaries: summarize(rows),
        wins: count(Outcome::Win),
        losses: count(Outcome::Loss),
        ties: count(Outcome::Tie),
        matrix,
        episodes,
    }
}

/// Runs both planners on identical problems and pairs the outcomes.
pub fn compare_planners(config: &BenchConfig, oracle: &dyn FeasibilityOracle) -> Result<(Vec<BenchRow>, Comparison)> {
    let config = BenchConfig { planner: PlannerSelector::Both, ..config.clone() };
    let rows = run_benchmark(&config, oracle)?;
    let cmp = compare_rows(&rows, &config.gait);
    Ok((rows, cmp))
}
