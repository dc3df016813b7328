//! Stepping-stone worlds: generation, mutation, goal sampling and the
//! versioned JSON terrain document.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, Vec3};
use crate::kinematics::{self, KinematicParams, Stance};
use crate::rng;
use crate::{Error, Result, NUM_FEET};

pub type StoneId = u32;

pub const TERRAIN_FORMAT_VERSION: u32 = 1;

/// A cylindrical stepping stone. The walkable surface is the top disc at
/// `z = height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stone {
    pub id: StoneId,
    /// Geometric center of the cylinder, world frame.
    pub center: Vec3,
    pub radius: f64,
    pub height: f64,
    pub alive: bool,
}

impl Stone {
    /// Center of the top disc, where contacts are placed.
    #[inline]
    pub fn top(&self) -> Vec3 {
        [self.center[0], self.center[1], self.height]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainGenParams {
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub spacing_x: f64,
    pub spacing_y: f64,
    pub stone_radius: f64,
    pub nominal_height: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub alpha_h: f64,
    pub n_removed: usize,
    /// Stones that are never removed, in addition to the start stones.
    pub protected_ids: BTreeSet<StoneId>,
}

impl Default for TerrainGenParams {
    fn default() -> Self {
        Self {
            grid_nx: 9,
            grid_ny: 9,
            spacing_x: 0.20,
            spacing_y: 0.15,
            stone_radius: 0.044,
            nominal_height: 0.10,
            alpha_x: 0.9,
            alpha_y: 0.9,
            alpha_h: 0.25,
            n_removed: 9,
            protected_ids: BTreeSet::new(),
        }
    }
}

impl TerrainGenParams {
    /// Regular grid, no randomization, nothing removed.
    pub fn regular(nx: usize, ny: usize) -> Self {
        Self { grid_nx: nx, grid_ny: ny, alpha_x: 0.0, alpha_y: 0.0, alpha_h: 0.0, n_removed: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_nx < 3 || self.grid_ny < 3 {
            return fail(format!("grid must be at least 3x3, got {}x{}", self.grid_nx, self.grid_ny));
        }
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y), ("alpha_h", self.alpha_h)] {
            if !(0.0..=1.0).contains(&a) {
                return fail(format!("{name} must lie in [0, 1], got {a}"));
            }
        }
        if !(self.stone_radius > 0.0) {
            return fail(format!("stone_radius must be positive, got {}", self.stone_radius));
        }
        if !(self.nominal_height >= 0.0) {
            return fail(format!("nominal_height must be non-negative, got {}", self.nominal_height));
        }
        if !(self.spacing_x / 2.0 - self.stone_radius > 0.0) || !(self.spacing_y / 2.0 - self.stone_radius > 0.0) {
            return fail("spacing/2 - stone_radius must be positive in both directions".into());
        }
        let n = self.grid_nx * self.grid_ny;
        if let Some(&bad) = self.protected_ids.iter().find(|&&id| id as usize >= n) {
            return fail(format!("protected id {bad} outside the {n}-stone grid"));
        }
        let protected = self.protected_set().len();
        if self.n_removed > n - protected {
            return fail(format!("cannot remove {} stones: only {} are unprotected", self.n_removed, n - protected));
        }
        Ok(())
    }

    /// Grid slot `(i, j)` position, centered on the origin.
    pub fn slot(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 - (self.grid_nx - 1) as f64 / 2.0) * self.spacing_x, (j as f64 - (self.grid_ny - 1) as f64 / 2.0) * self.spacing_y]
    }

    pub fn slot_id(&self, i: usize, j: usize) -> StoneId {
        (j * self.grid_nx + i) as StoneId
    }

    /// The four stones the robot starts on, ordered FL, FR, HL, HR: the slots
    /// one step away from the grid center in each direction.
    pub fn start_ids(&self) -> [StoneId; NUM_FEET] {
        let (ci, cj) = ((self.grid_nx - 1) / 2, (self.grid_ny - 1) / 2);
        [self.slot_id(ci + 1, cj + 1), self.slot_id(ci + 1, cj - 1), self.slot_id(ci - 1, cj + 1), self.slot_id(ci - 1, cj - 1)]
    }

    fn protected_set(&self) -> BTreeSet<StoneId> {
        let mut set = self.protected_ids.clone();
        set.extend(self.start_ids());
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalSampleParams {
    pub d_min_g: f64,
    pub d_max_g: f64,
    pub max_attempts: usize,
}

impl Default for GoalSampleParams {
    fn default() -> Self {
        Self { d_min_g: 0.28, d_max_g: 0.42, max_attempts: 10_000 }
    }
}

/// Per-foot goal stones and the contact points on their top centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub stone_ids: [StoneId; NUM_FEET],
    pub points: [Vec3; NUM_FEET],
}

impl GoalSpec {
    pub fn from_stones(map: &TerrainMap, ids: [StoneId; NUM_FEET]) -> Result<Self> {
        let mut points = [[0.0; 3]; NUM_FEET];
        for (p, &id) in points.iter_mut().zip(&ids) {
            let s = map.stone(id).ok_or(Error::StoneNotFound(id))?;
            if !s.alive {
                return Err(Error::Config(format!("goal stone {id} is removed")));
            }
            *p = s.top();
        }
        Ok(Self { stone_ids: ids, points })
    }

    pub fn centroid(&self) -> Vec3 {
        geometry::centroid(&self.points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainMap {
    stones: Vec<Stone>,
    pub gen_params: TerrainGenParams,
    pub seed: u64,
}

/// The on-disk terrain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainDocument {
    pub version: u32,
    pub seed: u64,
    pub gen_params: TerrainGenParams,
    pub stones: Vec<Stone>,
}

impl TerrainMap {
    /// Builds a map from explicit stones. Stones are sorted by id; ids must
    /// be unique and geometry valid.
    pub fn new(mut stones: Vec<Stone>, gen_params: TerrainGenParams, seed: u64) -> Result<Self> {
        stones.sort_by_key(|s| s.id);
        for w in stones.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate stone id {}", w[0].id)));
            }
        }
        for s in &stones {
            if !(s.radius > 0.0) || !(s.height >= 0.0) {
                return Err(Error::Config(format!("stone {} has invalid radius or height", s.id)));
            }
        }
        Ok(Self { stones, gen_params, seed })
    }

    pub fn stones(&self) -> &[Stone] {
        &self.stones
    }

    pub fn stone(&self, id: StoneId) -> Option<&Stone> {
        match self.stones.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.stones.binary_search_by_key(&id, |s| s.id).ok().map(|i| &self.stones[i]),
        }
    }

    fn stone_mut(&mut self, id: StoneId) -> Result<&mut Stone> {
        let idx = self.stones.binary_search_by_key(&id, |s| s.id).map_err(|_| Error::StoneNotFound(id))?;
        Ok(&mut self.stones[idx])
    }

    pub fn is_alive(&self, id: StoneId) -> bool {
        self.stone(id).is_some_and(|s| s.alive)
    }

    pub fn alive(&self) -> impl Iterator<Item = &Stone> + '_ {
        self.stones.iter().filter(|s| s.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.alive().count()
    }

    pub fn removed_count(&self) -> usize {
        self.stones.len() - self.alive_count()
    }

    /// Marks a stone as removed. Removing an already removed stone is a no-op.
    pub fn remove_stone(&mut self, id: StoneId) -> Result<()> {
        self.stone_mut(id)?.alive = false;
        Ok(())
    }

    pub fn restore_stone(&mut self, id: StoneId) -> Result<()> {
        self.stone_mut(id)?.alive = true;
        Ok(())
    }

    /// Largest center-to-center distance between two alive stones.
    pub fn max_patch_distance(&self) -> Result<f64> {
        let alive: Vec<Vec3> = self.alive().map(Stone::top).collect();
        if alive.len() < 2 {
            return Err(Error::DegenerateMap(format!("{} alive stones, need at least 2", alive.len())));
        }
        let mut best = 0.0f64;
        for (i, a) in alive.iter().enumerate() {
            for b in &alive[i + 1..] {
                best = best.max(geometry::dist(*a, *b));
            }
        }
        Ok(best)
    }

    /// Closest alive stone-top center to `point`; ties go to the lowest id.
    pub fn nearest_alive_stone(&self, point: Vec3) -> Result<(StoneId, f64)> {
        let mut best: Option<(StoneId, f64)> = None;
        for s in self.alive() {
            let d = geometry::dist(point, s.top());
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((s.id, d));
            }
        }
        best.ok_or_else(|| Error::DegenerateMap("no alive stones".into()))
    }

    /// Applies a rigid motion (yaw about the origin, then translation) to
    /// every stone. Heights shift with the vertical offset.
    pub fn transformed(&self, yaw: f64, offset: Vec3) -> Self {
        let mut out = self.clone();
        for s in &mut out.stones {
            s.center = geometry::add(geometry::rotate_z(s.center, yaw), offset);
            s.height += offset[2];
        }
        out
    }

    pub fn to_document(&self) -> TerrainDocument {
        TerrainDocument { version: TERRAIN_FORMAT_VERSION, seed: self.seed, gen_params: self.gen_params.clone(), stones: self.stones.clone() }
    }

    pub fn from_document(doc: TerrainDocument) -> Result<Self> {
        if doc.version != TERRAIN_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported terrain version {}", doc.version)));
        }
        Self::new(doc.stones, doc.gen_params, doc.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Generates a randomized grid of stones. Deterministic in `(params, seed)`.
pub fn generate_terrain(params: &TerrainGenParams, seed: u64) -> Result<TerrainMap> {
    params.validate()?;
    let half_x = params.spacing_x / 2.0 - params.stone_radius;
    let half_y = params.spacing_y / 2.0 - params.stone_radius;
    let mut stones = Vec::with_capacity(params.grid_nx * params.grid_ny);
    for j in 0..params.grid_ny {
        for i in 0..params.grid_nx {
            let id = params.slot_id(i, j);
            let eps_x = symmetric(&mut rng::stream(seed, rng::TAG_DISPLACE_X, id as u64), params.alpha_x);
            let eps_y = symmetric(&mut rng::stream(seed, rng::TAG_DISPLACE_Y, id as u64), params.alpha_y);
            let eps_h = symmetric(&mut rng::stream(seed, rng::TAG_HEIGHT, id as u64), params.alpha_h);
            let [x, y] = params.slot(i, j);
            let height = (1.0 + eps_h) * params.nominal_height;
            stones.push(Stone { id, center: [x + eps_x * half_x, y + eps_y * half_y, height / 2.0], radius: params.stone_radius, height, alive: true });
        }
    }
    let protected = params.protected_set();
    let candidates: Vec<usize> = (0..stones.len()).filter(|&i| !protected.contains(&stones[i].id)).collect();
    let mut rng = rng::stream(seed, rng::TAG_REMOVE, 0);
    for k in index::sample(&mut rng, candidates.len(), params.n_removed) {
        stones[candidates[k]].alive = false;
    }
    TerrainMap::new(stones, params.clone(), seed)
}

fn symmetric<R: Rng>(rng: &mut R, alpha: f64) -> f64 {
    if alpha == 0.0 {
        0.0
    } else {
        rng.gen_range(-alpha..=alpha)
    }
}

/// The nominal start stance on the generated grid.
pub fn start_stance(map: &TerrainMap) -> Result<Stance> {
    Stance::on_stones(map, map.gen_params.start_ids())
}

/// Goal with its centroid at `point`: each foot on the alive stone nearest
/// its nominal offset, keeping the heading of `stance`.
pub fn goal_at_point(map: &TerrainMap, stance: &Stance, point: [f64; 2], kin: &KinematicParams) -> Result<GoalSpec> {
    let yaw = kinematics::base_pose_from_stance(stance, kin)?.yaw;
    let z = stance.centroid()[2];
    let mut ids = [0; NUM_FEET];
    for (foot, id) in ids.iter_mut().enumerate() {
        let o = kin.nominal_offsets[foot];
        let target = geometry::add([point[0], point[1], z], geometry::rotate_z([o[0], o[1], 0.0], yaw));
        *id = map.nearest_alive_stone(target)?.0;
    }
    GoalSpec::from_stones(map, ids)
}

/// Samples a goal quadruple whose centroid lies within `[d_min_g, d_max_g]`
/// (horizontally) of the start base position.
///
/// Each attempt anchors the first foot on a random alive stone, places the
/// remaining feet on the alive stones nearest to their nominal offsets
/// (rotated by the start heading), and keeps the quadruple if it forms a
/// kinematically valid stance at the right distance.
pub fn sample_goal(map: &TerrainMap, start: &Stance, params: &GoalSampleParams, kin: &KinematicParams, seed: u64) -> Result<GoalSpec> {
    if !(0.0 <= params.d_min_g && params.d_min_g <= params.d_max_g) {
        return Err(Error::Config("goal distances must satisfy 0 <= d_min_g <= d_max_g".into()));
    }
    let alive: Vec<&Stone> = map.alive().collect();
    if alive.len() < NUM_FEET {
        return Err(Error::SamplingExhausted(0));
    }
    let start_pose = kinematics::base_pose_from_stance(start, kin)?;
    let nominal = &kin.nominal_offsets;
    let mut rng = rng::stream(seed, rng::TAG_GOAL, 0);
    for _ in 0..params.max_attempts {
        let anchor = alive[rng.gen_range(0..alive.len())];
        let mut ids = [anchor.id; NUM_FEET];
        for foot in 1..NUM_FEET {
            let rel = [nominal[foot][0] - nominal[0][0], nominal[foot][1] - nominal[0][1], 0.0];
            let target = geometry::add(anchor.top(), geometry::rotate_z(rel, start_pose.yaw));
            ids[foot] = map.nearest_alive_stone(target)?.0;
        }
        let Ok(candidate) = Stance::on_stones(map, ids) else { continue };
        if kinematics::check_stance(&candidate, kin).is_err() {
            continue;
        }
        let d = geometry::dist_xy(candidate.centroid(), start_pose.position);
        if params.d_min_g <= d && d <= params.d_max_g {
            return GoalSpec::from_stones(map, ids);
        }
    }
    Err(Error::SamplingExhausted(params.max_attempts))
}
