//! Naive contact planner: Raibert-style footholds projected onto the
//! nearest stones, one gait cycle at a time, no lookahead.

use serde::{Deserialize, Serialize};

use crate::feasibility::{CheckKind, FeasibilityOracle, GaitKind, GaitSpec, PlanVerdict};
use crate::geometry::{self, Vec3};
use crate::kinematics::{self, ActionSpec, BasePose, KinematicParams, RejectReason, Stance};
use crate::search::{ContactPlan, PlanResult, SearchStats};
use crate::terrain::{GoalSpec, StoneId, TerrainMap};
use crate::timing::Stopwatch;
use crate::{Error, Result, NUM_FEET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    /// Per-axis clip on the desired base velocity, m/s.
    pub v_max: f64,
    /// Feedforward horizon in seconds; `None` means half the stance time.
    pub gain_k: Option<f64>,
    /// Nominal footholds in the base frame; `None` uses the kinematic ones.
    pub nominal_offsets: Option<[[f64; 2]; NUM_FEET]>,
    pub max_steps: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self { v_max: 0.25, gain_k: None, nominal_offsets: None, max_steps: 20 }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0) {
            return Err(Error::Config("v_max must be positive".into()));
        }
        if self.gain_k.is_some_and(|k| !(k >= 0.0)) {
            return Err(Error::Config("gain_k must be non-negative".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gain(&self, gait: &GaitSpec) -> f64 {
        self.gain_k.unwrap_or(gait.stance_time() / 2.0)
    }

    fn offsets<'a>(&'a self, kin: &'a KinematicParams) -> &'a [[f64; 2]; NUM_FEET] {
        self.nominal_offsets.as_ref().unwrap_or(&kin.nominal_offsets)
    }
}

/// Why the naive planner stopped short of the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NaiveStop {
    /// No free stone within `d_step` of the foot.
    Stuck {
        foot: usize,
    },
    /// The projected stance breaks a kinematic rule.
    Rejected {
        reason: RejectReason,
    },
    /// Projection returned the current stance while away from the goal.
    NoProgress,
    /// The oracle rejected the transition.
    Infeasible {
        step: usize,
        check: Option<CheckKind>,
    },
    StepLimit,
}

/// Footholds for every foot: the nominal offset shifted by `k * v_des`,
/// placed at `pose` and at the mean foot height of `stance`.
pub fn raibert_targets(stance: &Stance, pose: &BasePose, v_des: [f64; 2], gait: &GaitSpec, params: &BaselineParams, kin: &KinematicParams) -> [Vec3; NUM_FEET] {
    let k = params.gain(gait);
    let z = stance.centroid()[2];
    let offsets = params.offsets(kin);
    std::array::from_fn(|f| {
        let local = [offsets[f][0] + k * v_des[0], offsets[f][1] + k * v_des[1], 0.0];
        let mut w = pose.to_world(local);
        w[2] = z;
        w
    })
}

/// Desired base velocity in the base frame: the velocity that would bring
/// the centroid onto the goal centroid within one cycle, clipped per axis.
pub fn desired_velocity(stance: &Stance, pose: &BasePose, goal: &GoalSpec, gait: &GaitSpec, v_max: f64) -> [f64; 2] {
    let delta = geometry::sub(goal.centroid(), stance.centroid());
    let local = geometry::rotate_z([delta[0], delta[1], 0.0], -pose.yaw);
    [(local[0] / gait.cycle_period).clamp(-v_max, v_max), (local[1] / gait.cycle_period).clamp(-v_max, v_max)]
}

/// Stones a foot may be projected onto, nearest to `target` first (ties by
/// id). With `reach = Some((origin, d))` only stones within horizontal
/// distance `d` of `origin` qualify.
fn ranked_stones(map: &TerrainMap, target: Vec3, reach: Option<(Vec3, f64)>) -> Vec<(f64, StoneId)> {
    let mut r: Vec<(f64, StoneId)> =
        map.alive().filter(|s| reach.map_or(true, |(o, d)| geometry::dist_xy(o, s.top()) <= d)).map(|s| (geometry::dist(target, s.top()), s.id)).collect();
    r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    r
}

/// Assigns each listed foot a distinct stone near its target point. Feet
/// are served closest-first by their nearest-stone distance (ties by foot
/// index) and each takes its nearest stone not yet taken. Returns
/// `Err(foot)` for the first foot left without a stone.
pub fn project_distinct(
    map: &TerrainMap,
    targets: &[Vec3; NUM_FEET],
    feet: &[usize],
    reach: Option<(&[Vec3; NUM_FEET], f64)>,
) -> std::result::Result<[Option<StoneId>; NUM_FEET], usize> {
    let ranked: Vec<(usize, Vec<(f64, StoneId)>)> = feet.iter().map(|&f| (f, ranked_stones(map, targets[f], reach.map(|(o, d)| (o[f], d))))).collect();
    let first = |r: &Vec<(f64, StoneId)>| r.first().map_or(f64::INFINITY, |x| x.0);
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| first(&ranked[a].1).total_cmp(&first(&ranked[b].1)).then(ranked[a].0.cmp(&ranked[b].0)));
    let mut out = [None; NUM_FEET];
    let mut taken: Vec<StoneId> = Vec::with_capacity(NUM_FEET);
    for i in order {
        let (foot, ref r) = ranked[i];
        let Some(&(_, id)) = r.iter().find(|(_, id)| !taken.contains(id)) else {
            return Err(foot);
        };
        taken.push(id);
        out[foot] = Some(id);
    }
    Ok(out)
}

/// One naive gait cycle. Jumping moves all four feet; trotting moves the
/// diagonal pair whose footholds are farther from their projections.
pub fn naive_step(
    map: &TerrainMap,
    stance: &Stance,
    goal: &GoalSpec,
    params: &BaselineParams,
    kin: &KinematicParams,
    gait: &GaitSpec,
) -> std::result::Result<ActionSpec, NaiveStop> {
    if stance.is_on(&goal.stone_ids) {
        return Ok(ActionSpec::identity(stance));
    }
    let pose = kinematics::base_pose_from_stance(stance, kin).map_err(|_| NaiveStop::Rejected { reason: RejectReason::DegenerateStance })?;
    let v_des = desired_velocity(stance, &pose, goal, gait, params.v_max);
    // Footholds are placed around where the base will be at touchdown.
    let advance = geometry::rotate_z([v_des[0] * gait.cycle_period, v_des[1] * gait.cycle_period, 0.0], pose.yaw);
    let touchdown = BasePose { position: geometry::add(pose.position, advance), yaw: pose.yaw };
    let targets = raibert_targets(stance, &touchdown, v_des, gait, params, kin);

    let all: Vec<usize> = (0..NUM_FEET).collect();
    let feet: Vec<usize> = match gait.name {
        GaitKind::Jump => all,
        GaitKind::Trot => {
            let spread = |pair: &[usize; 2]| pair.iter().map(|&f| geometry::dist_xy(stance.foot_points[f], targets[f])).sum::<f64>();
            let mut best = gait.diagonal_pairs[0];
            for pair in &gait.diagonal_pairs[1..] {
                if spread(pair) > spread(&best) {
                    best = *pair;
                }
            }
            best.to_vec()
        }
    };
    // Staying feet keep their stones; moving feet may not land on them.
    let mut ids = stance.foot_stone_ids;
    let mut masked = map.clone();
    for f in 0..NUM_FEET {
        if !feet.contains(&f) {
            let _ = masked.remove_stone(stance.foot_stone_ids[f]);
        }
    }
    let projected = project_distinct(&masked, &targets, &feet, Some((&stance.foot_points, kin.d_step))).map_err(|foot| NaiveStop::Stuck { foot })?;
    for &f in &feet {
        ids[f] = projected[f].expect("moving foot projected");
    }
    let action = ActionSpec::new(stance, ids);
    if action.is_identity() {
        return Err(NaiveStop::NoProgress);
    }
    kinematics::check_kinematics(map, stance, &action, kin).map_err(|reason| NaiveStop::Rejected { reason })?;
    Ok(action)
}

/// Result of running the naive planner to completion or failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveRollout {
    /// Success carries the plan; failure leaves `plans` empty.
    pub result: PlanResult,
    /// Executed actions, feasible prefix only.
    pub trace: ContactPlan,
    pub stop: Option<NaiveStop>,
}

/// Applies `naive_step` until the goal, a failure or `params.max_steps`.
/// Each transition is checked by the oracle before it is executed.
#[allow(clippy::too_many_arguments)]
pub fn naive_rollout(
    map: &TerrainMap,
    start: &Stance,
    goal: &GoalSpec,
    params: &BaselineParams,
    kin: &KinematicParams,
    gait: &GaitSpec,
    oracle: &dyn FeasibilityOracle,
) -> Result<NaiveRollout> {
    params.validate()?;
    let clock = Stopwatch::start();
    let mut stats = SearchStats::default();
    let mut actions = Vec::new();
    let mut stance = start.clone();
    let mut steps = Vec::new();
    let mut stop = None;
    while !stance.is_on(&goal.stone_ids) {
        if actions.len() >= params.max_steps {
            stop = Some(NaiveStop::StepLimit);
            break;
        }
        stats.iterations += 1;
        let action = match naive_step(map, &stance, goal, params, kin, gait) {
            Ok(a) => a,
            Err(s) => {
                stop = Some(s);
                break;
            }
        };
        let next = stance.apply(map, &action)?;
        stats.oracle_calls += 1;
        let verdict = oracle.evaluate(map, &[stance.clone(), next.clone()], gait)?;
        if !verdict.feasible() {
            let check = verdict.steps.last().and_then(|v| v.first_failure());
            stop = Some(NaiveStop::Infeasible { step: actions.len(), check });
            break;
        }
        steps.extend(verdict.steps);
        actions.push(action);
        stance = next;
    }
    let trace = ContactPlan::new(map, start, actions)?;
    let mut plans = Vec::new();
    let mut verdicts = Vec::new();
    if stop.is_none() {
        stats.iterations_to_first = Some(stats.iterations.max(1));
        plans.push(trace.clone());
        verdicts.push(PlanVerdict { w: 1, failed_step: None, steps });
    }
    stats.wall_ms = clock.elapsed_ms();
    Ok(NaiveRollout { result: PlanResult { plans, verdicts, stats }, trace, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feasibility::{BuiltinOracle, OracleParams};
    use crate::terrain::{generate_terrain, start_stance, TerrainGenParams};

    #[test]
    fn zero_velocity_puts_feet_home() {
        let map = generate_terrain(&TerrainGenParams::regular(9, 9), 0).unwrap();
        let s = start_stance(&map).unwrap();
        let kin = KinematicParams::default();
        let pose = kinematics::base_pose_from_stance(&s, &kin).unwrap();
        let t = raibert_targets(&s, &pose, [0.0, 0.0], &GaitSpec::jump(), &BaselineParams::default(), &kin);
        for f in 0..NUM_FEET {
            assert!(geometry::dist(t[f], s.foot_points[f]) < 1e-12);
        }
    }

    #[test]
    fn feedforward_shift() {
        let map = generate_terrain(&TerrainGenParams::regular(9, 9), 0).unwrap();
        let s = start_stance(&map).unwrap();
        let kin = KinematicParams::default();
        let pose = kinematics::base_pose_from_stance(&s, &kin).unwrap();
        let params = BaselineParams { gain_k: Some(0.36), ..Default::default() };
        let t = raibert_targets(&s, &pose, [0.25, 0.0], &GaitSpec::jump(), &params, &kin);
        for f in 0..NUM_FEET {
            assert!((t[f][0] - s.foot_points[f][0] - 0.09).abs() < 1e-12);
            assert!((t[f][1] - s.foot_points[f][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn far_goal_saturates_velocity() {
        let map = generate_terrain(&TerrainGenParams::regular(9, 9), 0).unwrap();
        let s = start_stance(&map).unwrap();
        let kin = KinematicParams::default();
        let p = &map.gen_params;
        // Five columns ahead is one meter.
        let goal = GoalSpec::from_stones(&map, [p.slot_id(8, 5), p.slot_id(8, 3), p.slot_id(6, 5), p.slot_id(6, 3)]).unwrap();
        let pose = kinematics::base_pose_from_stance(&s, &kin).unwrap();
        let v = desired_velocity(&s, &pose, &goal, &GaitSpec::jump(), 0.25);
        assert_eq!(v, [0.25, 0.0]);
        let at_goal = GoalSpec::from_stones(&map, s.foot_stone_ids).unwrap();
        assert_eq!(naive_step(&map, &s, &at_goal, &BaselineParams::default(), &kin, &GaitSpec::jump()), Ok(ActionSpec::identity(&s)));
    }

    #[test]
    fn straight_corridor_reaches_goal() {
        let map = generate_terrain(&TerrainGenParams::regular(9, 9), 0).unwrap();
        let s = start_stance(&map).unwrap();
        let p = &map.gen_params;
        let goal = GoalSpec::from_stones(&map, [p.slot_id(7, 5), p.slot_id(7, 3), p.slot_id(5, 5), p.slot_id(5, 3)]).unwrap();
        let oracle = BuiltinOracle::new(OracleParams::default());
        let out = naive_rollout(&map, &s, &goal, &BaselineParams::default(), &KinematicParams::default(), &GaitSpec::jump(), &oracle).unwrap();
        assert_eq!(out.stop, None);
        assert!(out.result.success());
        assert!(out.trace.final_stance().is_on(&goal.stone_ids));
    }

    #[test]
    fn missing_bridge_stops_the_rollout() {
        let mut map = generate_terrain(&TerrainGenParams::regular(9, 9), 0).unwrap();
        let s = start_stance(&map).unwrap();
        let p = map.gen_params.clone();
        let goal = GoalSpec::from_stones(&map, [p.slot_id(7, 5), p.slot_id(7, 3), p.slot_id(5, 5), p.slot_id(5, 3)]).unwrap();
        // Take out the whole column the front feet must pass through.
        for j in 0..9 {
            map.remove_stone(p.slot_id(6, j)).unwrap();
        }
        let oracle = BuiltinOracle::new(OracleParams::default());
        let out = naive_rollout(&map, &s, &goal, &BaselineParams::default(), &KinematicParams::default(), &GaitSpec::jump(), &oracle).unwrap();
        assert!(!out.result.success());
        assert!(out.stop.is_some());
    }
}
