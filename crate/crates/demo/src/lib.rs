//! Browser bindings: terrain generation, goal picking and planning, all
//! exchanged as JSON strings.

use serde::{Deserialize, Serialize};
use stepstone::baseline::{self, BaselineParams};
use stepstone::feasibility::{BuiltinOracle, GaitSpec, OracleParams};
use stepstone::kinematics::KinematicParams;
use stepstone::search::{self, PlannerConfig, SearchParams, SearchStats};
use stepstone::terrain::{self, GoalSpec, StoneId, TerrainGenParams, TerrainMap};
use stepstone::{Vec3, NUM_FEET};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct PlanRequest {
    pub planner: String,
    pub gait: String,
    pub seed: u64,
    pub max_iterations: u64,
}

impl Default for PlanRequest {
    fn default() -> Self {
        Self { planner: "mcts".into(), gait: "jump".into(), seed: 0, max_iterations: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReply {
    pub planner: String,
    pub success: bool,
    pub start: [StoneId; NUM_FEET],
    pub actions: Vec<[StoneId; NUM_FEET]>,
    /// Contact points per stance, start first.
    pub stances: Vec<[Vec3; NUM_FEET]>,
    pub stats: SearchStats,
    pub note: Option<String>,
}

fn err(e: impl ToString) -> String {
    e.to_string()
}

pub fn generate_json(seed: u64, nx: usize, ny: usize, n_removed: usize) -> Result<String, String> {
    let mut p = TerrainGenParams { grid_nx: nx, grid_ny: ny, n_removed, ..Default::default() };
    p.protected_ids.extend(p.start_ids());
    terrain::generate_terrain(&p, seed).and_then(|m| m.to_json()).map_err(err)
}

pub fn goal_near_json(terrain_json: &str, x: f64, y: f64) -> Result<String, String> {
    let map = TerrainMap::from_json(terrain_json).map_err(err)?;
    let start = terrain::start_stance(&map).map_err(err)?;
    let goal = terrain::goal_at_point(&map, &start, [x, y], &KinematicParams::default()).map_err(err)?;
    serde_json::to_string(&goal.stone_ids).map_err(err)
}

pub fn plan_json(terrain_json: &str, goal_json: &str, request_json: &str) -> Result<String, String> {
    let map = TerrainMap::from_json(terrain_json).map_err(err)?;
    let ids: [StoneId; NUM_FEET] = serde_json::from_str(goal_json).map_err(err)?;
    let req: PlanRequest = if request_json.trim().is_empty() { PlanRequest::default() } else { serde_json::from_str(request_json).map_err(err)? };
    let gait = match req.gait.as_str() {
        "jump" => GaitSpec::jump(),
        "trot" => GaitSpec::trot(),
        other => return Err(format!("unknown gait {other:?}")),
    };
    let goal = GoalSpec::from_stones(&map, ids).map_err(err)?;
    let start = terrain::start_stance(&map).map_err(err)?;
    let kin = KinematicParams::default();
    let oracle = BuiltinOracle::new(OracleParams::default());
    let (result, note) = match req.planner.as_str() {
        "mcts" => {
            let config = PlannerConfig {
                search: SearchParams { seed: req.seed, max_iterations: req.max_iterations.max(1), ..Default::default() },
                kinematics: kin,
                gait,
            };
            match search::plan(&map, &start, &goal, &config, &oracle) {
                Ok(r) => (r, None),
                Err(stepstone::Error::DeadRoot) => return Err("the start stance has no legal action".into()),
                Err(e) => return Err(err(e)),
            }
        }
        "naive" => {
            let r = baseline::naive_rollout(&map, &start, &goal, &BaselineParams::default(), &kin, &gait, &oracle).map_err(err)?;
            let note = r.stop.map(|s| format!("{s:?}"));
            // A failed rollout still shows how far it got.
            let mut result = r.result;
            if result.plans.is_empty() && !r.trace.actions.is_empty() {
                result.plans.push(r.trace);
                result.verdicts.clear();
                return reply("naive", false, &start, &result, note);
            }
            (result, note)
        }
        other => return Err(format!("unknown planner {other:?}")),
    };
    reply(&req.planner, result.success(), &start, &result, note)
}

fn reply(planner: &str, success: bool, start: &stepstone::kinematics::Stance, r: &search::PlanResult, note: Option<String>) -> Result<String, String> {
    let plan = r.plans.first();
    let out = PlanReply {
        planner: planner.into(),
        success,
        start: start.foot_stone_ids,
        actions: plan.map(|p| p.actions.iter().map(|a| a.target_stone_ids).collect()).unwrap_or_default(),
        stances: plan.map_or_else(|| vec![start.foot_points], |p| p.stances.iter().map(|s| s.foot_points).collect()),
        stats: r.stats.clone(),
        note,
    };
    serde_json::to_string(&out).map_err(err)
}

/// Terrain document for a fresh map; start stones are never removed.
#[wasm_bindgen]
pub fn generate(seed: u32, nx: u32, ny: u32, n_removed: u32) -> Result<String, JsError> {
    generate_json(seed as u64, nx as usize, ny as usize, n_removed as usize).map_err(|e| JsError::new(&e))
}

/// Goal stone ids, FL FR HL HR, for a body centered at `(x, y)`.
#[wasm_bindgen]
pub fn goal_near(terrain_json: &str, x: f64, y: f64) -> Result<String, JsError> {
    goal_near_json(terrain_json, x, y).map_err(|e| JsError::new(&e))
}

/// Plans from the start stance to the goal. `request_json` holds
/// `planner`, `gait`, `seed` and `max_iterations`, all optional.
#[wasm_bindgen]
pub fn plan(terrain_json: &str, goal_json: &str, request_json: &str) -> Result<String, JsError> {
    plan_json(terrain_json, goal_json, request_json).map_err(|e| JsError::new(&e))
}
