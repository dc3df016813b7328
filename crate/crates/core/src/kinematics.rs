//! Stances, actions and kinematic pruning.
//!
//! Feet are indexed `FL, FR, HL, HR`. The base frame has x pointing forward
//! (from hind to front feet) and y pointing left.

use serde::{Deserialize, Serialize};

use crate::feasibility::GaitSpec;
use crate::geometry::{self, Vec3};
use crate::terrain::{StoneId, TerrainMap};
use crate::{Error, Result, NUM_FEET};

pub const FL: usize = 0;
pub const FR: usize = 1;
pub const HL: usize = 2;
pub const HR: usize = 3;

pub const FOOT_NAMES: [&str; NUM_FEET] = ["FL", "FR", "HL", "HR"];

/// Which stone each foot stands on and where exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stance {
    pub foot_stone_ids: [StoneId; NUM_FEET],
    pub foot_points: [Vec3; NUM_FEET],
}

impl Stance {
    /// Stance with every foot on the top center of its stone. All stones
    /// must exist and be alive.
    pub fn on_stones(map: &TerrainMap, ids: [StoneId; NUM_FEET]) -> Result<Self> {
        let mut foot_points = [[0.0; 3]; NUM_FEET];
        for (p, &id) in foot_points.iter_mut().zip(&ids) {
            let s = map.stone(id).ok_or(Error::StoneNotFound(id))?;
            if !s.alive {
                return Err(Error::StalePlan(id));
            }
            *p = s.top();
        }
        Ok(Self { foot_stone_ids: ids, foot_points })
    }

    #[inline]
    pub fn key(&self) -> [StoneId; NUM_FEET] {
        self.foot_stone_ids
    }

    pub fn centroid(&self) -> Vec3 {
        geometry::centroid(&self.foot_points)
    }

    /// Successor stance: moving feet land on their target's top center,
    /// staying feet keep their exact contact point.
    pub fn apply(&self, map: &TerrainMap, action: &ActionSpec) -> Result<Stance> {
        let mut next = self.clone();
        for foot in 0..NUM_FEET {
            let target = action.target_stone_ids[foot];
            if target != self.foot_stone_ids[foot] {
                let s = map.stone(target).ok_or(Error::StoneNotFound(target))?;
                if !s.alive {
                    return Err(Error::StalePlan(target));
                }
                next.foot_stone_ids[foot] = target;
                next.foot_points[foot] = s.top();
            }
        }
        Ok(next)
    }

    pub fn is_on(&self, ids: &[StoneId; NUM_FEET]) -> bool {
        self.foot_stone_ids == *ids
    }
}

/// Next stone for every foot. A foot whose target equals its current stone
/// stays in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub target_stone_ids: [StoneId; NUM_FEET],
    pub moves: [bool; NUM_FEET],
}

impl ActionSpec {
    pub fn new(from: &Stance, targets: [StoneId; NUM_FEET]) -> Self {
        let mut moves = [false; NUM_FEET];
        for (m, (t, c)) in moves.iter_mut().zip(targets.iter().zip(&from.foot_stone_ids)) {
            *m = t != c;
        }
        Self { target_stone_ids: targets, moves }
    }

    pub fn identity(from: &Stance) -> Self {
        Self::new(from, from.foot_stone_ids)
    }

    pub fn is_identity(&self) -> bool {
        !self.moves.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicParams {
    /// Maximum horizontal step length of a single foot.
    pub d_step: f64,
    /// Half-extents of the region each foot may occupy around its nominal
    /// foothold, base frame.
    pub reach_box: Vec3,
    pub crossing_margin: f64,
    /// Nominal foothold of each foot in the base frame (x, y).
    pub nominal_offsets: [[f64; 2]; NUM_FEET],
    /// Base height above the mean foot height.
    pub nominal_height: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self { d_step: 0.24, reach_box: [0.12, 0.08, 0.10], crossing_margin: 0.02, nominal_offsets: nominal_offsets(0.20, 0.15), nominal_height: 0.25 }
    }
}

impl KinematicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_step > 0.0) {
            return Err(Error::Config(format!("d_step must be positive, got {}", self.d_step)));
        }
        if self.reach_box.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config("reach_box half-extents must be positive".into()));
        }
        if !(self.crossing_margin >= 0.0) {
            return Err(Error::Config("crossing_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(+ex, +ey), (+ex, -ey), (-ex, +ey), (-ex, -ey)` in foot order.
pub fn nominal_offsets(ex: f64, ey: f64) -> [[f64; 2]; NUM_FEET] {
    [[ex, ey], [ex, -ey], [-ex, ey], [-ex, -ey]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub position: Vec3,
    /// Heading in `(-pi, pi]`.
    pub yaw: f64,
}

impl BasePose {
    pub const IDENTITY: BasePose = BasePose { position: [0.0; 3], yaw: 0.0 };

    /// World point expressed in this frame.
    #[inline]
    pub fn to_base(&self, p: Vec3) -> Vec3 {
        geometry::rotate_z(geometry::sub(p, self.position), -self.yaw)
    }

    /// Base-frame point expressed in the world frame.
    #[inline]
    pub fn to_world(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::rotate_z(p, self.yaw), self.position)
    }
}

/// Base pose implied by foot placement: centroid raised by the nominal
/// height, heading along the hind-to-front direction.
pub fn base_pose_from_stance(stance: &Stance, params: &KinematicParams) -> Result<BasePose> {
    base_pose_from_points(&stance.foot_points, params.nominal_height)
}

pub fn base_pose_from_points(points: &[Vec3; NUM_FEET], nominal_height: f64) -> Result<BasePose> {
    let dx = (points[FL][0] + points[FR][0] - points[HL][0] - points[HR][0]) / 2.0;
    let dy = (points[FL][1] + points[FR][1] - points[HL][1] - points[HR][1]) / 2.0;
    if dx.hypot(dy) < 1e-9 {
        return Err(Error::DegenerateStance);
    }
    let mut position = geometry::centroid(points);
    position[2] += nominal_height;
    Ok(BasePose { position, yaw: geometry::wrap_angle(dy.atan2(dx)) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum RejectReason {
    StepTooLong { foot: usize },
    SharedStone,
    Crossing,
    OutOfReach { foot: usize },
    DegenerateStance,
}

/// Checks a candidate action against the step bound, the no-crossing rule
/// and the per-foot reach box. Returns the first violation found.
pub fn check_kinematics(map: &TerrainMap, stance: &Stance, action: &ActionSpec, params: &KinematicParams) -> std::result::Result<(), RejectReason> {
    let mut post = stance.foot_points;
    for foot in 0..NUM_FEET {
        let target = action.target_stone_ids[foot];
        if target != stance.foot_stone_ids[foot] {
            // Unknown stones can never be reached.
            let Some(s) = map.stone(target) else {
                return Err(RejectReason::StepTooLong { foot });
            };
            post[foot] = s.top();
        }
    }
    check_transition_points(stance, &action.target_stone_ids, &post, params)
}

pub fn is_kinematically_valid(map: &TerrainMap, stance: &Stance, action: &ActionSpec, params: &KinematicParams) -> bool {
    check_kinematics(map, stance, action, params).is_ok()
}

fn check_transition_points(
    stance: &Stance,
    targets: &[StoneId; NUM_FEET],
    post: &[Vec3; NUM_FEET],
    params: &KinematicParams,
) -> std::result::Result<(), RejectReason> {
    for foot in 0..NUM_FEET {
        if targets[foot] != stance.foot_stone_ids[foot] && geometry::dist_xy(stance.foot_points[foot], post[foot]) > params.d_step {
            return Err(RejectReason::StepTooLong { foot });
        }
    }
    check_placement(targets, post, params)
}

/// Checks that a stance, by itself, could be held: distinct stones, no
/// crossing, every foot inside its reach box.
pub fn check_stance(stance: &Stance, params: &KinematicParams) -> std::result::Result<(), RejectReason> {
    check_placement(&stance.foot_stone_ids, &stance.foot_points, params)
}

fn check_placement(ids: &[StoneId; NUM_FEET], points: &[Vec3; NUM_FEET], params: &KinematicParams) -> std::result::Result<(), RejectReason> {
    for a in 0..NUM_FEET {
        for b in a + 1..NUM_FEET {
            if ids[a] == ids[b] {
                return Err(RejectReason::SharedStone);
            }
        }
    }
    let pose = base_pose_from_points(points, params.nominal_height).map_err(|_| RejectReason::DegenerateStance)?;
    let local = points.map(|p| pose.to_base(p));
    let m = params.crossing_margin;
    if local[FL][1] - local[FR][1] < m || local[HL][1] - local[HR][1] < m || local[FL][0] - local[HL][0] < m || local[FR][0] - local[HR][0] < m {
        return Err(RejectReason::Crossing);
    }
    let z_ref = -params.nominal_height;
    for foot in 0..NUM_FEET {
        let nom = params.nominal_offsets[foot];
        let p = local[foot];
        if (p[0] - nom[0]).abs() > params.reach_box[0] || (p[1] - nom[1]).abs() > params.reach_box[1] || (p[2] - z_ref).abs() > params.reach_box[2] {
            return Err(RejectReason::OutOfReach { foot });
        }
    }
    Ok(())
}

/// Stones each foot may land on next: its current stone first considered in
/// id order together with every alive stone within `d_step`.
fn foot_candidates(stance: &Stance, map: &TerrainMap, params: &KinematicParams, foot: usize) -> Vec<(StoneId, Vec3)> {
    let here = stance.foot_points[foot];
    let current = stance.foot_stone_ids[foot];
    let mut out: Vec<(StoneId, Vec3)> =
        map.alive().filter(|s| s.id != current && geometry::dist_xy(here, s.top()) <= params.d_step).map(|s| (s.id, s.top())).collect();
    out.push((current, here));
    out.sort_by_key(|c| c.0);
    out
}

/// Every kinematically valid action from `stance`, sorted lexicographically
/// by target stone ids.
pub fn enumerate_actions(stance: &Stance, map: &TerrainMap, params: &KinematicParams, gait: &GaitSpec) -> Vec<ActionSpec> {
    let candidates: [Vec<(StoneId, Vec3)>; NUM_FEET] = std::array::from_fn(|f| foot_candidates(stance, map, params, f));
    let mut out = Vec::new();
    for movable in gait.movable_sets() {
        let pick: [Vec<(StoneId, Vec3)>; NUM_FEET] =
            std::array::from_fn(|f| if movable[f] { candidates[f].clone() } else { vec![(stance.foot_stone_ids[f], stance.foot_points[f])] });
        for a in &pick[0] {
            for b in &pick[1] {
                if b.0 == a.0 {
                    continue;
                }
                for c in &pick[2] {
                    if c.0 == a.0 || c.0 == b.0 {
                        continue;
                    }
                    for d in &pick[3] {
                        if d.0 == a.0 || d.0 == b.0 || d.0 == c.0 {
                            continue;
                        }
                        let ids = [a.0, b.0, c.0, d.0];
                        let pts = [a.1, b.1, c.1, d.1];
                        if check_placement(&ids, &pts, params).is_ok() {
                            out.push(ActionSpec::new(stance, ids));
                        }
                    }
                }
            }
        }
    }
    if gait.movable_sets().len() > 1 {
        out.sort_by_key(|a| a.target_stone_ids);
        out.dedup();
    }
    out
}
