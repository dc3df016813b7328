// Independent reference implementations the library is checked against.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use stepstone::feasibility::{self, GaitSpec, OracleParams};
use stepstone::kinematics::{self, ActionSpec, KinematicParams, Stance};
use stepstone::terrain::{self, GoalSampleParams, GoalSpec, StoneId, TerrainGenParams, TerrainMap};
use stepstone::NUM_FEET;

pub type Key = [StoneId; NUM_FEET];

/// Every 4-tuple of alive stones, kept when the moved feet form an allowed
/// set for the gait and the action passes the kinematic predicate.
pub fn brute_force_actions(stance: &Stance, map: &TerrainMap, kin: &KinematicParams, gait: &GaitSpec) -> BTreeSet<Key> {
    let mut ids: Vec<StoneId> = map.alive().map(|s| s.id).collect();
    ids.extend(stance.foot_stone_ids);
    ids.sort_unstable();
    ids.dedup();
    let sets = gait.movable_sets();
    let mut out = BTreeSet::new();
    for &a in &ids {
        for &b in &ids {
            for &c in &ids {
                for &d in &ids {
                    let t = [a, b, c, d];
                    let moved: Vec<usize> = (0..NUM_FEET).filter(|&f| t[f] != stance.foot_stone_ids[f]).collect();
                    if !sets.iter().any(|m| moved.iter().all(|&f| m[f])) {
                        continue;
                    }
                    if kinematics::is_kinematically_valid(map, stance, &ActionSpec::new(stance, t), kin) {
                        out.insert(t);
                    }
                }
            }
        }
    }
    out
}

/// The whole stance graph reachable from `start`, built from the
/// brute-force action sets. Edges failing the closed-form per-step check
/// are dropped.
pub struct StanceGraph {
    pub edges: HashMap<Key, BTreeSet<Key>>,
    pub goal: Key,
    pub start: Key,
}

impl StanceGraph {
    pub fn build(map: &TerrainMap, start: &Stance, goal: &GoalSpec, kin: &KinematicParams, gait: &GaitSpec, oracle: &OracleParams) -> Self {
        let mut edges = HashMap::new();
        let mut stack = vec![start.clone()];
        while let Some(s) = stack.pop() {
            if edges.contains_key(&s.foot_stone_ids) {
                continue;
            }
            let mut out = BTreeSet::new();
            for t in brute_force_actions(&s, map, kin, gait) {
                let next = s.apply(map, &ActionSpec::new(&s, t)).unwrap();
                if feasibility::check_step(&s, &next, gait, oracle).feasible {
                    out.insert(t);
                    stack.push(next);
                }
            }
            edges.insert(s.foot_stone_ids, out);
        }
        Self { edges, goal: goal.stone_ids, start: start.foot_stone_ids }
    }

    /// Whether `plan` is one of the exhaustive plans: a simple path from
    /// the start along graph edges, touching the goal only at its end, of
    /// at most `max_len` steps.
    pub fn contains_plan(&self, plan: &[Key], max_len: usize) -> bool {
        if plan.len() > max_len {
            return false;
        }
        let mut seen = HashSet::from([self.start]);
        let mut here = self.start;
        for (i, &t) in plan.iter().enumerate() {
            if here == self.goal || !self.edges[&here].contains(&t) || !seen.insert(t) {
                return false;
            }
            here = t;
            if here == self.goal && i + 1 != plan.len() {
                return false;
            }
        }
        here == self.goal
    }

    /// Counts the exhaustive plans by depth-first search, up to `cap`.
    pub fn count_plans(&self, max_len: usize, cap: usize) -> usize {
        fn go(g: &StanceGraph, here: Key, path: &mut Vec<Key>, max_len: usize, cap: usize, n: &mut usize) {
            if *n >= cap {
                return;
            }
            if here == g.goal {
                *n += 1;
                return;
            }
            if path.len() > max_len {
                return;
            }
            for &t in &g.edges[&here] {
                if !path.contains(&t) {
                    path.push(t);
                    go(g, t, path, max_len, cap, n);
                    path.pop();
                }
            }
        }
        let mut n = 0;
        go(self, self.start, &mut vec![self.start], max_len, cap, &mut n);
        n
    }
}

pub fn sqr(x: f64) -> f64 {
    x * x
}

/// Closest alive stone top by linear scan, lowest id on ties.
pub fn nearest_by_scan(map: &TerrainMap, p: [f64; 3]) -> (StoneId, f64) {
    let mut best = (StoneId::MAX, f64::INFINITY);
    for s in map.stones() {
        if !s.alive {
            continue;
        }
        let d = (sqr(p[0] - s.center[0]) + sqr(p[1] - s.center[1]) + sqr(p[2] - s.height)).sqrt();
        if d < best.1 || (d == best.1 && s.id < best.0) {
            best = (s.id, d);
        }
    }
    best
}

/// A small problem for the soundness checks: `nx` x `ny` grid, `removed`
/// stones gone, goal sampled close to the start.
pub fn small_problem(nx: usize, ny: usize, removed: usize, seed: u64) -> Option<(TerrainMap, Stance, GoalSpec)> {
    let params = TerrainGenParams { grid_nx: nx, grid_ny: ny, n_removed: removed, ..Default::default() };
    let map = terrain::generate_terrain(&params, seed).ok()?;
    let start = terrain::start_stance(&map).ok()?;
    let goals = GoalSampleParams { d_min_g: 0.05, d_max_g: 0.25, max_attempts: 2000 };
    let goal = terrain::sample_goal(&map, &start, &goals, &KinematicParams::default(), seed).ok()?;
    Some((map, start, goal))
}
