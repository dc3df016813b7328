//! Supervised training records.
//!
//! Every sample describes one jump of a feasible plan, expressed in the base
//! frame of the stance the robot stands in before that jump: the alive
//! stone centers, the feet and base velocities, the goal footholds, and the
//! footholds of the next `HORIZON` jumps. Past the end of a plan the goal
//! footholds are repeated.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::feasibility::{self, FeasibilityOracle, GaitSpec, OracleParams};
use crate::geometry::{self, Vec3};
use crate::kinematics::{self, ActionSpec, BasePose, KinematicParams, Stance};
use crate::rng;
use crate::search::{self, ContactPlan, PlannerConfig, SearchParams};
use crate::terrain::{self, GoalSampleParams, GoalSpec, StoneId, TerrainGenParams, TerrainMap};
use crate::{Error, Result, NUM_FEET};

pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Number of future jumps predicted per sample.
pub const HORIZON: usize = 2;
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Base velocities in the world frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseState {
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub env_id: u32,
    pub goal_id: u32,
    pub path_id: u32,
    pub perturb_id: u32,
    pub step_index: u32,
    pub x_contact: Vec<Vec3>,
    /// Feet, then base linear velocity, then base angular velocity.
    pub x_state: Vec<Vec3>,
    pub x_goal: Vec<Vec3>,
    /// `HORIZON` groups of one foothold per foot.
    pub y: Vec<Vec3>,
    /// Distance from each `y` foothold to the patch center it projects to.
    pub y_projection_dist: Vec<f64>,
}

impl DatasetSample {
    pub fn input_len(n_contacts: usize) -> usize {
        3 * (n_contacts + 2 * (NUM_FEET + 1))
    }

    pub fn output_len() -> usize {
        3 * HORIZON * NUM_FEET
    }

    /// `x_contact`, `x_state`, `x_goal` flattened in that order.
    pub fn input_vector(&self) -> Vec<f64> {
        self.x_contact.iter().chain(&self.x_state).chain(&self.x_goal).flatten().copied().collect()
    }

    pub fn output_vector(&self) -> Vec<f64> {
        self.y.iter().flatten().copied().collect()
    }
}

pub fn world_to_base(points: &[Vec3], pose: &BasePose) -> Vec<Vec3> {
    points.iter().map(|&p| pose.to_base(p)).collect()
}

pub fn base_to_world(points: &[Vec3], pose: &BasePose) -> Vec<Vec3> {
    points.iter().map(|&p| pose.to_world(p)).collect()
}

/// Nearest alive stone-top center for each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<Vec3>,
    pub stone_ids: Vec<StoneId>,
    pub distances: Vec<f64>,
}

pub fn project_to_patch_centers(points: &[Vec3], map: &TerrainMap) -> Result<Projection> {
    let mut out = Projection { points: Vec::new(), stone_ids: Vec::new(), distances: Vec::new() };
    for &p in points {
        let (id, d) = map.nearest_alive_stone(p)?;
        out.points.push(map.stone(id).expect("alive stone").top());
        out.stone_ids.push(id);
        out.distances.push(d);
    }
    Ok(out)
}

/// Encodes one sample. `next_actions` must hold exactly `HORIZON` actions,
/// the first taken from `stance`.
pub fn encode_sample(
    map: &TerrainMap,
    stance: &Stance,
    base_state: &BaseState,
    goal: &GoalSpec,
    next_actions: &[ActionSpec],
    kin: &KinematicParams,
) -> Result<DatasetSample> {
    if next_actions.len() != HORIZON {
        return Err(Error::Encoding(format!("expected {HORIZON} future actions, got {}", next_actions.len())));
    }
    let pose = kinematics::base_pose_from_stance(stance, kin)?;
    let contacts: Vec<Vec3> = map.alive().map(|s| s.top()).collect();
    let mut targets = Vec::with_capacity(HORIZON * NUM_FEET);
    for a in next_actions {
        for &id in &a.target_stone_ids {
            let s = map.stone(id).ok_or(Error::StoneNotFound(id))?;
            if !s.alive {
                return Err(Error::StalePlan(id));
            }
            targets.push(s.top());
        }
    }
    let projected = project_to_patch_centers(&targets, map)?;

    let mut x_state = world_to_base(&stance.foot_points, &pose);
    x_state.push(geometry::rotate_z(base_state.linear_velocity, -pose.yaw));
    x_state.push(geometry::rotate_z(base_state.angular_velocity, -pose.yaw));
    let sample = DatasetSample {
        env_id: 0,
        goal_id: 0,
        path_id: 0,
        perturb_id: 0,
        step_index: 0,
        x_contact: world_to_base(&contacts, &pose),
        x_state,
        x_goal: world_to_base(&goal.points, &pose),
        y: world_to_base(&projected.points, &pose),
        y_projection_dist: projected.distances,
    };
    if sample.input_vector().len() != DatasetSample::input_len(contacts.len()) || sample.output_vector().len() != DatasetSample::output_len() {
        return Err(Error::Encoding("sample length mismatch".into()));
    }
    Ok(sample)
}

/// Magnitudes of the random perturbations applied to recorded episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    /// Radius of the disc around each stone center a contact may land in.
    pub contact_radius: f64,
    /// Per-axis bound on the added base linear velocity, m/s.
    pub linear_velocity: f64,
    /// Per-axis bound on the added base angular velocity, rad/s.
    pub angular_velocity: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { contact_radius: 0.02, linear_velocity: 0.1, angular_velocity: 0.1 }
    }
}

impl Jitter {
    pub const NONE: Jitter = Jitter { contact_radius: 0.0, linear_velocity: 0.0, angular_velocity: 0.0 };
}

/// A recorded execution of a plan: exact stances and the base state at
/// each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub stances: Vec<Stance>,
    pub base_states: Vec<BaseState>,
}

/// Base states of a stance sequence: touchdown velocity estimated by the
/// closed-form oracle and yaw rate over one cycle. The first stance is at
/// rest.
pub fn estimate_base_states(stances: &[Stance], gait: &GaitSpec, oracle: &OracleParams, kin: &KinematicParams) -> Result<Vec<BaseState>> {
    let mut out = Vec::with_capacity(stances.len());
    out.push(BaseState::default());
    for pair in stances.windows(2) {
        let v = feasibility::check_step(&pair[0], &pair[1], gait, oracle);
        let y0 = kinematics::base_pose_from_stance(&pair[0], kin)?.yaw;
        let y1 = kinematics::base_pose_from_stance(&pair[1], kin)?.yaw;
        let yaw_rate = geometry::wrap_angle(y1 - y0) / gait.cycle_period;
        out.push(BaseState { linear_velocity: v.touchdown_velocity, angular_velocity: [0.0, 0.0, yaw_rate] });
    }
    Ok(out)
}

/// Outcome of one perturbation attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub episode: Episode,
    pub accepted: bool,
    pub failed_step: Option<usize>,
}

/// Re-samples every landing point uniformly inside a disc of
/// `jitter.contact_radius` around its stone center, adds bounded noise to
/// the base velocities, and re-checks the perturbed stance sequence with the
/// oracle.
#[allow(clippy::too_many_arguments)]
pub fn perturb_episode(
    map: &TerrainMap,
    plan: &ContactPlan,
    gait: &GaitSpec,
    jitter: &Jitter,
    oracle_params: &OracleParams,
    kin: &KinematicParams,
    oracle: &dyn FeasibilityOracle,
    seed: u64,
) -> Result<Perturbation> {
    let mut rng = rng::stream(seed, rng::TAG_PERTURB, 0);
    let mut disc = |center: Vec3| -> Vec3 {
        if jitter.contact_radius == 0.0 {
            return center;
        }
        let r = jitter.contact_radius * rng.gen::<f64>().sqrt();
        let t = std::f64::consts::TAU * rng.gen::<f64>();
        [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
    };
    let mut stances = Vec::with_capacity(plan.stances.len());
    let first = &plan.stances[0];
    let mut current = first.clone();
    for f in 0..NUM_FEET {
        current.foot_points[f] = disc(stone_top(map, first.foot_stone_ids[f])?);
    }
    stances.push(current.clone());
    for a in &plan.actions {
        for f in 0..NUM_FEET {
            if a.target_stone_ids[f] != current.foot_stone_ids[f] {
                current.foot_stone_ids[f] = a.target_stone_ids[f];
                current.foot_points[f] = disc(stone_top(map, a.target_stone_ids[f])?);
            }
        }
        stances.push(current.clone());
    }
    let mut base_states = estimate_base_states(&stances, gait, oracle_params, kin)?;
    let mut noise = |b: f64| if b == 0.0 { 0.0 } else { rng.gen_range(-b..=b) };
    for s in &mut base_states {
        for k in 0..3 {
            s.linear_velocity[k] += noise(jitter.linear_velocity);
        }
        for k in 0..3 {
            s.angular_velocity[k] += noise(jitter.angular_velocity);
        }
    }
    let verdict = oracle.evaluate(map, &stances, gait)?;
    Ok(Perturbation { accepted: verdict.feasible(), failed_step: verdict.failed_step, episode: Episode { stances, base_states } })
}

fn stone_top(map: &TerrainMap, id: StoneId) -> Result<Vec3> {
    Ok(map.stone(id).ok_or(Error::StoneNotFound(id))?.top())
}

/// One sample per action of the plan, observed from the episode's stances.
pub fn encode_episode(map: &TerrainMap, plan: &ContactPlan, episode: &Episode, goal: &GoalSpec, kin: &KinematicParams) -> Result<Vec<DatasetSample>> {
    let mut out = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let stance = &episode.stances[i];
        let next: Vec<ActionSpec> = (i..i + HORIZON)
            .map(|k| {
                plan.actions.get(k).copied().unwrap_or_else(|| {
                    let end = &episode.stances[plan.len()];
                    ActionSpec::identity(end)
                })
            })
            .collect();
        let mut s = encode_sample(map, stance, &episode.base_states[i], goal, &next, kin)?;
        s.step_index = i as u32;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetGenParams {
    pub n_env: usize,
    pub n_goals: usize,
    /// Feasible plans kept per goal.
    pub n_paths: usize,
    /// Perturbed replays attempted per plan.
    pub n_rand: usize,
    pub jitter: Jitter,
    pub terrain: TerrainGenParams,
    pub goals: GoalSampleParams,
    pub kinematics: KinematicParams,
    pub search: SearchParams,
    pub gait: GaitSpec,
    pub oracle: OracleParams,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for DatasetGenParams {
    fn default() -> Self {
        Self {
            n_env: 4,
            n_goals: 4,
            n_paths: 3,
            n_rand: 5,
            jitter: Jitter::default(),
            terrain: TerrainGenParams::default(),
            goals: GoalSampleParams::default(),
            kinematics: KinematicParams::default(),
            search: SearchParams::default(),
            gait: GaitSpec::jump(),
            oracle: OracleParams::default(),
            seed: 0,
            workers: 0,
        }
    }
}

impl DatasetGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_env < 1 || self.n_goals < 1 || self.n_paths < 1 {
            return Err(Error::Config("n_env, n_goals and n_paths must be at least 1".into()));
        }
        let j = &self.jitter;
        if !(j.contact_radius >= 0.0 && j.linear_velocity >= 0.0 && j.angular_velocity >= 0.0) {
            return Err(Error::Config("jitter magnitudes must be non-negative".into()));
        }
        if j.contact_radius > self.terrain.stone_radius {
            return Err(Error::Config("contact jitter radius exceeds the stone radius".into()));
        }
        self.terrain.validate()?;
        self.kinematics.validate()?;
        self.search.validate()?;
        self.gait.validate()?;
        self.oracle.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub envs: usize,
    pub goals: usize,
    pub goals_unsampled: usize,
    pub goals_unsolved: usize,
    pub plans: usize,
    pub perturbations_attempted: usize,
    pub perturbations_accepted: usize,
    pub episodes: usize,
    pub samples: usize,
}

impl DatasetCounts {
    fn add(&mut self, o: &DatasetCounts) {
        self.envs += o.envs;
        self.goals += o.goals;
        self.goals_unsampled += o.goals_unsampled;
        self.goals_unsolved += o.goals_unsolved;
        self.plans += o.plans;
        self.perturbations_attempted += o.perturbations_attempted;
        self.perturbations_accepted += o.perturbations_accepted;
        self.episodes += o.episodes;
        self.samples += o.samples;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSeeds {
    pub master: u64,
    pub envs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: DatasetGenParams,
    pub counts: DatasetCounts,
    pub seeds: DatasetSeeds,
    pub samples_file: String,
    pub horizon: usize,
}

pub fn env_seed(master: u64, env: usize) -> u64 {
    rng::derive_seed(master, rng::TAG_ENV, env as u64)
}

/// All samples of one environment, in (goal, path, perturbation, step)
/// order.
pub fn generate_env(params: &DatasetGenParams, env: usize) -> Result<(Vec<DatasetSample>, DatasetCounts)> {
    let seed = env_seed(params.seed, env);
    let mut tp = params.terrain.clone();
    tp.protected_ids.extend(tp.start_ids());
    let map = terrain::generate_terrain(&tp, seed)?;
    let start = terrain::start_stance(&map)?;
    let oracle = feasibility::BuiltinOracle::new(params.oracle.clone());
    let mut counts = DatasetCounts { envs: 1, ..Default::default() };
    let mut samples = Vec::new();
    for g in 0..params.n_goals {
        counts.goals += 1;
        let goal_seed = rng::derive_seed(seed, rng::TAG_GOAL, g as u64);
        let goal = match terrain::sample_goal(&map, &start, &params.goals, &params.kinematics, goal_seed) {
            Ok(goal) => goal,
            Err(Error::SamplingExhausted(_)) => {
                counts.goals_unsampled += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let config = PlannerConfig {
            search: SearchParams { keep_paths: params.n_paths, seed: goal_seed, ..params.search.clone() },
            kinematics: params.kinematics.clone(),
            gait: params.gait.clone(),
        };
        let result = match search::plan(&map, &start, &goal, &config, &oracle) {
            Ok(r) => r,
            Err(Error::DeadRoot) => {
                counts.goals_unsolved += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if result.plans.is_empty() {
            counts.goals_unsolved += 1;
        }
        for (p, plan) in result.plans.iter().enumerate() {
            counts.plans += 1;
            let base =
                Episode { stances: plan.stances.clone(), base_states: estimate_base_states(&plan.stances, &params.gait, &params.oracle, &params.kinematics)? };
            let mut episodes = vec![(0u32, base)];
            for k in 1..=params.n_rand {
                counts.perturbations_attempted += 1;
                let pseed = rng::derive_seed(rng::derive_seed(goal_seed, rng::TAG_PERTURB, p as u64), rng::TAG_PERTURB, k as u64);
                let pert = perturb_episode(&map, plan, &params.gait, &params.jitter, &params.oracle, &params.kinematics, &oracle, pseed)?;
                if pert.accepted {
                    counts.perturbations_accepted += 1;
                    episodes.push((k as u32, pert.episode));
                }
            }
            for (k, ep) in episodes {
                counts.episodes += 1;
                for mut s in encode_episode(&map, plan, &ep, &goal, &params.kinematics)? {
                    s.env_id = env as u32;
                    s.goal_id = g as u32;
                    s.path_id = p as u32;
                    s.perturb_id = k;
                    samples.push(s);
                }
            }
        }
    }
    counts.samples = samples.len();
    Ok((samples, counts))
}

pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Generates every environment (in parallel batches) and streams samples
/// to `out` as JSON lines in environment order.
pub fn write_dataset<W: Write>(params: &DatasetGenParams, out: &mut W) -> Result<Manifest> {
    params.validate()?;
    let workers = worker_count(params.workers);
    let mut counts = DatasetCounts::default();
    let envs: Vec<usize> = (0..params.n_env).collect();
    for batch in envs.chunks(workers) {
        let results: Vec<Result<(Vec<DatasetSample>, DatasetCounts)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch.iter().map(|&e| scope.spawn(move || generate_env(params, e))).collect();
            handles.into_iter().map(|h| h.join().expect("dataset worker panicked")).collect()
        });
        for r in results {
            let (samples, c) = r?;
            for s in &samples {
                serde_json::to_writer(&mut *out, s)?;
                out.write_all(b"\n")?;
            }
            counts.add(&c);
        }
    }
    out.flush()?;
    Ok(Manifest {
        version: DATASET_FORMAT_VERSION,
        // The worker count does not change the output.
        params: DatasetGenParams { workers: 0, ..params.clone() },
        counts,
        seeds: DatasetSeeds { master: params.seed, envs: envs.iter().map(|&e| env_seed(params.seed, e)).collect() },
        samples_file: SAMPLES_FILE.into(),
        horizon: HORIZON,
    })
}

/// Writes `samples.jsonl` and `manifest.json` into `dir`.
pub fn generate_dataset(params: &DatasetGenParams, dir: &Path) -> Result<Manifest> {
    params.validate()?;
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join(SAMPLES_FILE))?;
    let mut w = std::io::BufWriter::new(file);
    let manifest = write_dataset(params, &mut w)?;
    drop(w);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_samples(path: &Path) -> Result<Vec<DatasetSample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
