//! Dynamic feasibility of contact transitions.
//!
//! The built-in oracle is a closed-form centroidal/ballistic model: it looks
//! at how far the stance centroid travels, how much it climbs, the takeoff
//! speed a jump would need, and whether the center of mass stays over its
//! support. An external process can replace it through the plan-exchange
//! document (see [`ExternalOracle`]).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::geometry::{self, Vec3};
use crate::kinematics::{self, ActionSpec, Stance};
use crate::terrain::{StoneId, TerrainDocument, TerrainMap};
use crate::{Error, Result, NUM_FEET};

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitKind {
    Jump,
    Trot,
}

impl std::str::FromStr for GaitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jump" => Ok(GaitKind::Jump),
            "trot" => Ok(GaitKind::Trot),
            other => Err(Error::Config(format!("unknown gait `{other}` (expected jump or trot)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitSpec {
    pub name: GaitKind,
    /// Seconds per gait cycle.
    pub cycle_period: f64,
    /// Fraction of the cycle a foot spends on the ground.
    pub stance_fraction: f64,
    /// Airborne time of a jump. Zero for trotting.
    pub flight_time: f64,
    /// Diagonal pairs that swing together when trotting.
    #[serde(default)]
    pub diagonal_pairs: Vec<[usize; 2]>,
}

impl GaitSpec {
    pub fn jump() -> Self {
        Self { name: GaitKind::Jump, cycle_period: 0.8, stance_fraction: 0.625, flight_time: 0.3, diagonal_pairs: vec![] }
    }

    /// Slow trot: 0.9 s period, 84 % stance.
    pub fn trot() -> Self {
        Self {
            name: GaitKind::Trot,
            cycle_period: 0.9,
            stance_fraction: 0.84,
            flight_time: 0.0,
            diagonal_pairs: vec![[kinematics::FL, kinematics::HR], [kinematics::FR, kinematics::HL]],
        }
    }

    pub fn of_kind(kind: GaitKind) -> Self {
        match kind {
            GaitKind::Jump => Self::jump(),
            GaitKind::Trot => Self::trot(),
        }
    }

    pub fn stance_time(&self) -> f64 {
        self.cycle_period * self.stance_fraction
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_period > 0.0) {
            return Err(Error::Config("gait period must be positive".into()));
        }
        if !(self.stance_fraction > 0.0 && self.stance_fraction <= 1.0) {
            return Err(Error::Config("stance_fraction must lie in (0, 1]".into()));
        }
        if !(self.flight_time >= 0.0 && self.flight_time < self.cycle_period) {
            return Err(Error::Config("flight_time must lie in [0, period)".into()));
        }
        if self.name == GaitKind::Jump && self.flight_time == 0.0 {
            return Err(Error::Config("jump gait needs a positive flight_time".into()));
        }
        if self.name == GaitKind::Trot {
            let mut seen = [false; NUM_FEET];
            for &[a, b] in &self.diagonal_pairs {
                if a >= NUM_FEET || b >= NUM_FEET || a == b || seen[a] || seen[b] {
                    return Err(Error::Config("trot diagonal pairs must partition the feet".into()));
                }
                seen[a] = true;
                seen[b] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Config("trot diagonal pairs must cover every foot".into()));
            }
        }
        Ok(())
    }

    /// Sets of feet allowed to leave their stone within one planning step.
    pub fn movable_sets(&self) -> Vec<[bool; NUM_FEET]> {
        match self.name {
            GaitKind::Jump => vec![[true; NUM_FEET]],
            GaitKind::Trot => self
                .diagonal_pairs
                .iter()
                .map(|&[a, b]| {
                    let mut m = [false; NUM_FEET];
                    m[a] = true;
                    m[b] = true;
                    m
                })
                .collect(),
        }
    }

    /// The diagonal pair that swings in a trot transition, if the move is a
    /// single-pair move.
    fn swing_pair(&self, moves: &[bool; NUM_FEET]) -> Option<[usize; 2]> {
        self.diagonal_pairs.iter().copied().find(|&[a, b]| (0..NUM_FEET).all(|f| !moves[f] || f == a || f == b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub gravity: f64,
    pub v_takeoff_max: f64,
    pub com_disp_max: f64,
    pub dh_max: f64,
    pub support_margin: f64,
    pub trot_line_margin: f64,
    pub d_step: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self { gravity: 9.81, v_takeoff_max: 1.8, com_disp_max: 0.28, dh_max: 0.10, support_margin: 0.02, trot_line_margin: 0.05, d_step: 0.24 }
    }
}

impl OracleParams {
    /// Thresholds loose enough that every kinematically valid transition on
    /// a desk-scale map passes.
    pub fn permissive() -> Self {
        Self { gravity: 9.81, v_takeoff_max: 1e6, com_disp_max: 1e6, dh_max: 1e6, support_margin: 1e-9, trot_line_margin: 1e6, d_step: 1e6 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gravity, self.v_takeoff_max, self.com_disp_max, self.dh_max, self.support_margin, self.trot_line_margin, self.d_step];
        if all.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("oracle parameters must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    StepLength,
    ComDisplacement,
    HeightChange,
    TakeoffSpeed,
    SupportPolygon,
    TrotSupportLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub feasible: bool,
    pub checks: Vec<CheckResult>,
    pub takeoff_velocity: Vec3,
    pub touchdown_velocity: Vec3,
}

impl OracleVerdict {
    pub fn first_failure(&self) -> Option<CheckKind> {
        self.checks.iter().find(|c| !c.passed).map(|c| c.check)
    }
}

/// Outcome of evaluating a whole plan. `w` is `+1` when every transition is
/// feasible and `-1` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanVerdict {
    pub w: i8,
    pub failed_step: Option<usize>,
    pub steps: Vec<OracleVerdict>,
}

impl PlanVerdict {
    pub fn feasible(&self) -> bool {
        self.w > 0
    }
}

fn push(checks: &mut Vec<CheckResult>, check: CheckKind, value: f64, limit: f64, ok_if_le: bool) {
    let passed = if ok_if_le { value <= limit } else { value >= limit };
    checks.push(CheckResult { check, value, limit, passed });
}

/// Evaluates one transition between two stances.
pub fn check_step(pre: &Stance, post: &Stance, gait: &GaitSpec, params: &OracleParams) -> OracleVerdict {
    let mut checks = Vec::with_capacity(6);
    let max_step = (0..NUM_FEET)
        .filter(|&f| pre.foot_stone_ids[f] != post.foot_stone_ids[f])
        .map(|f| geometry::dist_xy(pre.foot_points[f], post.foot_points[f]))
        .fold(0.0, f64::max);
    push(&mut checks, CheckKind::StepLength, max_step, params.d_step, true);

    let c0 = pre.centroid();
    let c1 = post.centroid();
    let dxy = [c1[0] - c0[0], c1[1] - c0[1]];
    let dxy_norm = dxy[0].hypot(dxy[1]);
    let dz = c1[2] - c0[2];
    push(&mut checks, CheckKind::ComDisplacement, dxy_norm, params.com_disp_max, true);
    push(&mut checks, CheckKind::HeightChange, dz.abs(), params.dh_max, true);

    let (takeoff_velocity, touchdown_velocity) = match gait.name {
        GaitKind::Jump => {
            let t = gait.flight_time;
            let g = params.gravity;
            let vz0 = dz / t + g * t / 2.0;
            let vx = dxy[0] / t;
            let vy = dxy[1] / t;
            let speed = (dxy_norm / t).hypot(vz0);
            push(&mut checks, CheckKind::TakeoffSpeed, speed, params.v_takeoff_max, true);
            ([vx, vy, vz0], [vx, vy, vz0 - g * t])
        }
        GaitKind::Trot => {
            // One pair swings during half a cycle.
            let t = gait.cycle_period / 2.0;
            let v = [dxy[0] / t, dxy[1] / t, dz / t];
            (v, v)
        }
    };

    let hull = geometry::convex_hull_xy(&post.foot_points);
    let inside = geometry::signed_dist_in_polygon([c1[0], c1[1]], &hull);
    push(&mut checks, CheckKind::SupportPolygon, inside, params.support_margin, false);

    if gait.name == GaitKind::Trot {
        let moves: [bool; NUM_FEET] = std::array::from_fn(|f| pre.foot_stone_ids[f] != post.foot_stone_ids[f]);
        let line_dist = if !moves.iter().any(|&m| m) {
            0.0
        } else if let Some(swing) = gait.swing_pair(&moves) {
            // The other diagonal carries the body while `swing` is in the air.
            let support: Vec<usize> = (0..NUM_FEET).filter(|f| !swing.contains(f)).collect();
            let (a, b) = (pre.foot_points[support[0]], pre.foot_points[support[1]]);
            geometry::point_segment_dist_xy(c0, a, b).max(geometry::point_segment_dist_xy(c1, a, b))
        } else {
            f64::INFINITY
        };
        push(&mut checks, CheckKind::TrotSupportLine, line_dist, params.trot_line_margin, true);
    }

    OracleVerdict { feasible: checks.iter().all(|c| c.passed), checks, takeoff_velocity, touchdown_velocity }
}

/// Convenience wrapper evaluating `action` taken from `stance`.
pub fn check_transition(map: &TerrainMap, stance: &Stance, action: &ActionSpec, gait: &GaitSpec, params: &OracleParams) -> Result<OracleVerdict> {
    let post = stance.apply(map, action)?;
    Ok(check_step(stance, &post, gait, params))
}

/// Anything that can decide whether a sequence of stances is executable.
pub trait FeasibilityOracle: Send + Sync {
    /// `stances[0]` is the start; each consecutive pair is one transition.
    fn evaluate(&self, map: &TerrainMap, stances: &[Stance], gait: &GaitSpec) -> Result<PlanVerdict>;
}

/// Builds the stance sequence of a plan, rejecting references to removed
/// stones, and evaluates it.
pub fn check_plan(oracle: &dyn FeasibilityOracle, map: &TerrainMap, start: &Stance, actions: &[ActionSpec], gait: &GaitSpec) -> Result<PlanVerdict> {
    oracle.evaluate(map, &stance_sequence(map, start, actions)?, gait)
}

pub fn stance_sequence(map: &TerrainMap, start: &Stance, actions: &[ActionSpec]) -> Result<Vec<Stance>> {
    let mut stances = Vec::with_capacity(actions.len() + 1);
    stances.push(start.clone());
    for a in actions {
        for &id in &a.target_stone_ids {
            match map.stone(id) {
                Some(s) if s.alive => {}
                Some(_) => return Err(Error::StalePlan(id)),
                None => return Err(Error::StoneNotFound(id)),
            }
        }
        let next = stances.last().expect("non-empty").apply(map, a)?;
        stances.push(next);
    }
    Ok(stances)
}

/// The closed-form oracle with a verdict cache.
///
/// The cache is keyed by the full bit pattern of the stance sequence, gait
/// and thresholds, so cached and fresh answers are always identical.
pub struct BuiltinOracle {
    pub params: OracleParams,
    cache: Mutex<HashMap<Vec<u64>, PlanVerdict>>,
    transitions: AtomicU64,
    evaluations: AtomicU64,
}

impl BuiltinOracle {
    pub fn new(params: OracleParams) -> Self {
        Self { params, cache: Mutex::new(HashMap::new()), transitions: AtomicU64::new(0), evaluations: AtomicU64::new(0) }
    }

    /// Number of single-transition evaluations actually computed.
    pub fn transition_evaluations(&self) -> u64 {
        self.transitions.load(Ordering::Relaxed)
    }

    /// Number of plan evaluations that missed the cache.
    pub fn plan_evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn clear_cache(&self) {
        self.cache.lock().expect("oracle cache poisoned").clear();
    }

    fn key(&self, stances: &[Stance], gait: &GaitSpec) -> Vec<u64> {
        let p = &self.params;
        let mut k = Vec::with_capacity(16 + stances.len() * 16);
        k.extend([gait.name as u64, gait.cycle_period.to_bits(), gait.stance_fraction.to_bits(), gait.flight_time.to_bits()]);
        k.extend(gait.diagonal_pairs.iter().flat_map(|&[a, b]| [a as u64, b as u64]));
        k.extend([p.gravity, p.v_takeoff_max, p.com_disp_max, p.dh_max, p.support_margin, p.trot_line_margin, p.d_step].map(f64::to_bits));
        for s in stances {
            k.extend(s.foot_stone_ids.map(u64::from));
            k.extend(s.foot_points.iter().flat_map(|p| p.map(f64::to_bits)));
        }
        k
    }
}

impl FeasibilityOracle for BuiltinOracle {
    fn evaluate(&self, _map: &TerrainMap, stances: &[Stance], gait: &GaitSpec) -> Result<PlanVerdict> {
        if stances.is_empty() {
            return Err(Error::Config("cannot evaluate an empty stance sequence".into()));
        }
        let key = self.key(stances, gait);
        if let Some(v) = self.cache.lock().expect("oracle cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut steps = Vec::with_capacity(stances.len() - 1);
        let mut failed_step = None;
        for (i, pair) in stances.windows(2).enumerate() {
            self.transitions.fetch_add(1, Ordering::Relaxed);
            let v = check_step(&pair[0], &pair[1], gait, &self.params);
            let ok = v.feasible;
            steps.push(v);
            if !ok {
                failed_step = Some(i);
                break;
            }
        }
        let verdict = PlanVerdict { w: if failed_step.is_some() { -1 } else { 1 }, failed_step, steps };
        self.cache.lock().expect("oracle cache poisoned").insert(key, verdict.clone());
        Ok(verdict)
    }
}

/// Stance as written in the plan-exchange document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceDoc {
    pub stone_ids: [StoneId; NUM_FEET],
    pub points: [Vec3; NUM_FEET],
}

impl From<&Stance> for StanceDoc {
    fn from(s: &Stance) -> Self {
        Self { stone_ids: s.foot_stone_ids, points: s.foot_points }
    }
}

impl From<&StanceDoc> for Stance {
    fn from(d: &StanceDoc) -> Self {
        Stance { foot_stone_ids: d.stone_ids, foot_points: d.points }
    }
}

/// Plan-exchange document: the contract with external oracles and the
/// output of the `plan` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub version: u32,
    pub terrain: TerrainDocument,
    pub gait: GaitSpec,
    pub start_stance: StanceDoc,
    /// One list of per-foot target stone ids per planning step.
    pub actions: Vec<[StoneId; NUM_FEET]>,
    /// Exact contact points per step when they differ from stone centers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stances: Option<Vec<StanceDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[StoneId; NUM_FEET]>,
}

impl PlanDocument {
    pub fn new(map: &TerrainMap, gait: &GaitSpec, start: &Stance, actions: &[ActionSpec]) -> Result<Self> {
        Ok(Self {
            version: PLAN_FORMAT_VERSION,
            terrain: map.to_document(),
            gait: gait.clone(),
            start_stance: start.into(),
            actions: actions.iter().map(|a| a.target_stone_ids).collect(),
            stances: None,
            goal: None,
        })
    }

    pub fn terrain_map(&self) -> Result<TerrainMap> {
        TerrainMap::from_document(self.terrain.clone())
    }

    /// Rebuilds the action list against the start stance.
    pub fn action_specs(&self) -> Vec<ActionSpec> {
        let mut stance = Stance::from(&self.start_stance);
        let mut out = Vec::with_capacity(self.actions.len());
        for &targets in &self.actions {
            let a = ActionSpec::new(&stance, targets);
            stance.foot_stone_ids = targets;
            out.push(a);
        }
        out
    }
}

/// Verdict document returned by external oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictDocument {
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_step: Option<usize>,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

/// Runs a shell command per evaluation: the plan-exchange document is
/// written to its stdin, a verdict document is read from its stdout.
pub struct ExternalOracle {
    pub command: String,
    pub timeout: Duration,
    /// Used instead when the external process fails.
    pub fallback: Option<BuiltinOracle>,
}

impl ExternalOracle {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self { command: command.into(), timeout, fallback: None }
    }

    pub fn with_fallback(mut self, fallback: BuiltinOracle) -> Self {
        self.fallback = Some(fallback);
        self
    }

    /// Sends one document and returns the parsed verdict.
    pub fn exchange(&self, doc: &PlanDocument) -> Result<VerdictDocument> {
        let unavailable = |m: String| Error::OracleUnavailable(m);
        let payload = serde_json::to_vec(doc)?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| unavailable(format!("spawn failed: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || {
            // The child may exit without reading; a broken pipe is fine.
            let _ = stdin.write_all(&payload);
            let _ = stdin.write_all(b"\n");
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stdout.read_to_string(&mut buf);
            buf
        });
        let started = std::time::Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(unavailable(format!("timed out after {} ms", self.timeout.as_millis())));
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        let _ = writer.join();
        let out = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(unavailable(format!("exited with {status}")));
        }
        serde_json::from_str(out.trim()).map_err(|e| unavailable(format!("malformed verdict: {e}")))
    }

    fn evaluate_external(&self, map: &TerrainMap, stances: &[Stance], gait: &GaitSpec) -> Result<PlanVerdict> {
        let mut doc = PlanDocument::new(map, gait, &stances[0], &[])?;
        doc.actions = stances[1..].iter().map(|s| s.foot_stone_ids).collect();
        doc.stances = Some(stances.iter().map(StanceDoc::from).collect());
        let v = self.exchange(&doc)?;
        Ok(PlanVerdict { w: if v.feasible { 1 } else { -1 }, failed_step: if v.feasible { None } else { v.failed_step }, steps: Vec::new() })
    }
}

impl FeasibilityOracle for ExternalOracle {
    fn evaluate(&self, map: &TerrainMap, stances: &[Stance], gait: &GaitSpec) -> Result<PlanVerdict> {
        if stances.is_empty() {
            return Err(Error::Config("cannot evaluate an empty stance sequence".into()));
        }
        match self.evaluate_external(map, stances, gait) {
            Err(Error::OracleUnavailable(_)) if self.fallback.is_some() => self.fallback.as_ref().expect("checked").evaluate(map, stances, gait),
            other => other,
        }
    }
}
