//! Monte Carlo tree search over contact sequences.
//!
//! Each iteration selects a leaf by UCB, expands it with every kinematically
//! valid action, takes one random action from it (rollout depth one) and
//! back-propagates the shaped distance-to-goal reward of the resulting
//! stance. Dynamic feasibility is only evaluated once a sequence reaches the
//! goal stance; the outcome sets the sign of the back-propagated reward.
//!
//! Nodes are keyed by the stones the feet stand on, so a stance reached along
//! different paths is a single node. Selection never re-enters a node that is
//! already on the current path.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::feasibility::{self, FeasibilityOracle, GaitSpec, PlanVerdict};
use crate::geometry::{self, Vec3};
use crate::kinematics::{self, ActionSpec, KinematicParams, Stance};
use crate::rng;
use crate::terrain::{GoalSpec, StoneId, TerrainMap};
use crate::timing::Stopwatch;
use crate::{Error, Result, NUM_FEET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    /// Exploration weight `c` of the UCB score.
    pub exploration_c: f64,
    /// Steepness `T` of the reward shaping `sigmoid(T (x - 1))`.
    pub shaping_t: f64,
    pub max_iterations: u64,
    pub max_plan_length: usize,
    /// Number of distinct feasible plans to collect before stopping.
    pub keep_paths: usize,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { exploration_c: 0.01, shaping_t: 5.0, max_iterations: 10_000, max_plan_length: 15, keep_paths: 1, seed: 0 }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.exploration_c >= 0.0) {
            return Err(Error::Config("exploration_c must be non-negative".into()));
        }
        if self.max_iterations < 1 || self.max_plan_length < 1 || self.keep_paths < 1 {
            return Err(Error::Config("max_iterations, max_plan_length and keep_paths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Accumulated value `Q(s, a)` and visit count `N(s, a)` of an edge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub q_sum: f64,
    pub visits: u64,
}

/// `Q/N + c sqrt(ln N(s) / N)`, or `+inf` for an unvisited edge.
#[inline]
pub fn ucb_score(edge: &EdgeStats, parent_visits: u64, c: f64) -> f64 {
    if edge.visits == 0 {
        return f64::INFINITY;
    }
    let n = edge.visits as f64;
    edge.q_sum / n + c * ((parent_visits as f64).ln() / n).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shaped reward of a stance: `w * sigmoid(T (m - 1))` where `m` is the mean
/// over feet of `1 - |c_j - g_j| / d_max`, each term clamped to `[0, 1]`.
pub fn state_reward(points: &[Vec3; NUM_FEET], goal: &GoalSpec, d_max: f64, w: f64, shaping_t: f64) -> f64 {
    let mut m = 0.0;
    for (p, g) in points.iter().zip(&goal.points) {
        m += (1.0 - geometry::dist(*p, *g) / d_max).clamp(0.0, 1.0);
    }
    m /= NUM_FEET as f64;
    w * sigmoid(shaping_t * (m - 1.0))
}

pub type NodeId = u32;
const NO_CHILD: NodeId = NodeId::MAX;

#[derive(Debug, Clone)]
pub struct Edge {
    /// Target stones of the action; also the key of the child node.
    pub targets: [StoneId; NUM_FEET],
    pub stats: EdgeStats,
    child: NodeId,
}

impl Edge {
    pub fn child(&self) -> Option<NodeId> {
        (self.child != NO_CHILD).then_some(self.child)
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub stance: Stance,
    pub expanded: bool,
    pub terminal: bool,
    /// `N(s)`, the sum of the visit counts of the outgoing edges.
    pub visits: u64,
    pub edges: Vec<Edge>,
}

/// Path from the root: the edges taken and the leaf they end at.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub path: Vec<(NodeId, usize)>,
    pub leaf: NodeId,
    /// Every edge of the leaf leads back onto the path.
    pub blocked: bool,
}

/// Successor chosen by the depth-one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// Edge of the leaf that was taken; `None` for terminal leaves and dead
    /// ends.
    pub edge: Option<usize>,
    /// Stance whose reward is back-propagated.
    pub stance: Stance,
    pub dead_end: bool,
}

pub struct SearchTree {
    nodes: Vec<Node>,
    index: HashMap<[StoneId; NUM_FEET], NodeId>,
    goal: [StoneId; NUM_FEET],
}

impl SearchTree {
    pub const ROOT: NodeId = 0;

    pub fn new(root: Stance, goal: &GoalSpec) -> Self {
        let mut tree = Self { nodes: Vec::new(), index: HashMap::new(), goal: goal.stone_ids };
        tree.insert(root);
        tree
    }

    fn insert(&mut self, stance: Stance) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let terminal = stance.is_on(&self.goal);
        self.index.insert(stance.key(), id);
        self.nodes.push(Node { stance, expanded: false, terminal, visits: 0, edges: Vec::new() });
        id
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lookup(&self, key: &[StoneId; NUM_FEET]) -> Option<NodeId> {
        self.index.get(key).copied()
    }

    /// Child node of an edge, created on first use. Transpositions resolve
    /// to the existing node.
    pub fn child(&mut self, map: &TerrainMap, node: NodeId, edge: usize) -> Result<NodeId> {
        let e = &self.nodes[node as usize].edges[edge];
        if let Some(c) = e.child() {
            return Ok(c);
        }
        let key = e.targets;
        let id = match self.index.get(&key) {
            Some(&id) => id,
            None => {
                let parent = &self.nodes[node as usize].stance;
                let stance = parent.apply(map, &ActionSpec::new(parent, key))?;
                self.insert(stance)
            }
        };
        self.nodes[node as usize].edges[edge].child = id;
        Ok(id)
    }

    /// Adds one zero-initialized edge per valid action. Returns the number
    /// of edges added; expanding twice adds nothing.
    pub fn expand(&mut self, node: NodeId, map: &TerrainMap, kin: &KinematicParams, gait: &GaitSpec) -> usize {
        let n = &mut self.nodes[node as usize];
        if n.expanded || n.terminal {
            return 0;
        }
        n.edges = kinematics::enumerate_actions(&n.stance, map, kin, gait)
            .into_iter()
            .map(|a| Edge { targets: a.target_stone_ids, stats: EdgeStats::default(), child: NO_CHILD })
            .collect();
        n.expanded = true;
        n.edges.len()
    }

    /// Descends from the root by maximal UCB score (first index wins ties)
    /// until reaching an unexpanded or terminal node, or `max_depth` edges.
    pub fn select(&mut self, map: &TerrainMap, c: f64, max_depth: usize) -> Result<Selection> {
        let root = &self.nodes[Self::ROOT as usize];
        if root.expanded && !root.terminal && root.edges.is_empty() {
            return Err(Error::DeadRoot);
        }
        let mut path = Vec::new();
        let mut on_path: Vec<[StoneId; NUM_FEET]> = vec![root.stance.key()];
        let mut current = Self::ROOT;
        loop {
            let node = &self.nodes[current as usize];
            if !node.expanded || node.terminal || path.len() >= max_depth {
                return Ok(Selection { path, leaf: current, blocked: false });
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, e) in node.edges.iter().enumerate() {
                if on_path.contains(&e.targets) {
                    continue;
                }
                let score = ucb_score(&e.stats, node.visits, c);
                if best.map_or(true, |(_, b)| score > b) {
                    best = Some((i, score));
                }
            }
            let Some((edge, _)) = best else {
                return Ok(Selection { path, leaf: current, blocked: true });
            };
            let child = self.child(map, current, edge)?;
            path.push((current, edge));
            on_path.push(self.nodes[child as usize].stance.key());
            current = child;
        }
    }

    /// Picks the stance to score: the leaf itself if terminal, otherwise the
    /// successor of one uniformly random action.
    pub fn simulate<R: Rng>(&self, map: &TerrainMap, leaf: NodeId, rng: &mut R) -> Result<Simulation> {
        let node = &self.nodes[leaf as usize];
        if node.terminal {
            return Ok(Simulation { edge: None, stance: node.stance.clone(), dead_end: false });
        }
        if node.edges.is_empty() {
            return Ok(Simulation { edge: None, stance: node.stance.clone(), dead_end: true });
        }
        let k = rng.gen_range(0..node.edges.len());
        let e = &node.edges[k];
        let stance = match e.child() {
            Some(c) => self.nodes[c as usize].stance.clone(),
            None => node.stance.apply(map, &ActionSpec::new(&node.stance, e.targets))?,
        };
        Ok(Simulation { edge: Some(k), stance, dead_end: false })
    }

    /// Adds `r` to `Q` and one to `N` on every edge of `path`.
    pub fn backpropagate(&mut self, path: &[(NodeId, usize)], r: f64) {
        for &(node, edge) in path {
            let n = &mut self.nodes[node as usize];
            let e = &mut n.edges[edge].stats;
            e.q_sum += r;
            e.visits += 1;
            n.visits += 1;
        }
    }

    /// Action sequence along a path.
    pub fn actions_along(&self, path: &[(NodeId, usize)]) -> Vec<ActionSpec> {
        path.iter()
            .map(|&(node, edge)| {
                let n = &self.nodes[node as usize];
                ActionSpec::new(&n.stance, n.edges[edge].targets)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPlan {
    pub actions: Vec<ActionSpec>,
    /// Start stance followed by the stance after every action.
    pub stances: Vec<Stance>,
}

impl ContactPlan {
    pub fn new(map: &TerrainMap, start: &Stance, actions: Vec<ActionSpec>) -> Result<Self> {
        let stances = feasibility::stance_sequence(map, start, &actions)?;
        Ok(Self { actions, stances })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_stance(&self) -> &Stance {
        self.stances.last().expect("plan has a start stance")
    }

    pub fn stones(&self) -> impl Iterator<Item = StoneId> + '_ {
        self.stances.iter().flat_map(|s| s.foot_stone_ids)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub iterations: u64,
    pub iterations_to_first: Option<u64>,
    pub wall_ms: f64,
    /// Distinct terminal sequences sent to the feasibility oracle.
    pub oracle_calls: u64,
    pub nodes_expanded: u64,
    pub cancelled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plans: Vec<ContactPlan>,
    pub verdicts: Vec<PlanVerdict>,
    pub stats: SearchStats,
}

impl PlanResult {
    pub fn success(&self) -> bool {
        !self.plans.is_empty()
    }

    pub fn first(&self) -> Option<&ContactPlan> {
        self.plans.first()
    }
}

/// Everything the planner needs besides the problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub search: SearchParams,
    pub kinematics: KinematicParams,
    pub gait: GaitSpec,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { search: SearchParams::default(), kinematics: KinematicParams::default(), gait: GaitSpec::jump() }
    }
}

/// Cooperative stop signals checked once per iteration.
#[derive(Debug, Clone, Default)]
pub struct SearchControl {
    pub cancel: Option<Arc<AtomicBool>>,
    pub deadline_ms: Option<f64>,
}

impl SearchControl {
    fn should_stop(&self, clock: &Stopwatch) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) || self.deadline_ms.is_some_and(|d| clock.elapsed_ms() >= d)
    }
}

pub fn plan(map: &TerrainMap, start: &Stance, goal: &GoalSpec, config: &PlannerConfig, oracle: &dyn FeasibilityOracle) -> Result<PlanResult> {
    plan_with_control(map, start, goal, config, oracle, &SearchControl::default())
}

pub fn plan_with_control(
    map: &TerrainMap,
    start: &Stance,
    goal: &GoalSpec,
    config: &PlannerConfig,
    oracle: &dyn FeasibilityOracle,
    control: &SearchControl,
) -> Result<PlanResult> {
    config.search.validate()?;
    let clock = Stopwatch::start();
    let params = &config.search;
    let d_max = map.max_patch_distance()?;
    let reward = |points: &[Vec3; NUM_FEET], w: f64| state_reward(points, goal, d_max, w, params.shaping_t);
    let mut rng: ChaCha8Rng = rng::stream(params.seed, rng::TAG_SEARCH, 0);

    let mut tree = SearchTree::new(start.clone(), goal);
    let mut stats = SearchStats::default();

    if tree.expand(SearchTree::ROOT, map, &config.kinematics, &config.gait) > 0 {
        stats.nodes_expanded += 1;
    }
    let root_terminal = tree.node(SearchTree::ROOT).terminal;
    if !root_terminal && tree.node(SearchTree::ROOT).edges.is_empty() {
        return Err(Error::DeadRoot);
    }

    let mut recorder = Recorder { map, start, gait: &config.gait, oracle, evaluated: HashMap::new(), plans: Vec::new(), verdicts: Vec::new() };

    for iteration in 1..=params.max_iterations {
        if control.should_stop(&clock) {
            stats.cancelled = true;
            break;
        }
        stats.iterations = iteration;
        let sel = tree.select(map, params.exploration_c, params.max_plan_length)?;
        let mut path = sel.path;
        let leaf = tree.node(sel.leaf);
        let r = if leaf.terminal {
            let w = recorder.evaluate(tree.actions_along(&path), iteration, &mut stats)?;
            reward(&leaf.stance.foot_points, w as f64)
        } else if sel.blocked || path.len() >= params.max_plan_length {
            reward(&leaf.stance.foot_points, -1.0)
        } else {
            if tree.expand(sel.leaf, map, &config.kinematics, &config.gait) > 0 {
                stats.nodes_expanded += 1;
            }
            let sim = tree.simulate(map, sel.leaf, &mut rng)?;
            match sim.edge {
                None => reward(&sim.stance.foot_points, if sim.dead_end { -1.0 } else { 1.0 }),
                Some(k) => {
                    path.push((sel.leaf, k));
                    let w = if sim.stance.is_on(&goal.stone_ids) { recorder.evaluate(tree.actions_along(&path), iteration, &mut stats)? } else { 1 };
                    reward(&sim.stance.foot_points, w as f64)
                }
            }
        };
        tree.backpropagate(&path, r);
        if recorder.plans.len() >= params.keep_paths || root_terminal {
            break;
        }
    }
    stats.wall_ms = clock.elapsed_ms();
    Ok(PlanResult { plans: recorder.plans, verdicts: recorder.verdicts, stats })
}

/// Sends each distinct terminal sequence to the oracle once and keeps the
/// feasible ones.
struct Recorder<'a> {
    map: &'a TerrainMap,
    start: &'a Stance,
    gait: &'a GaitSpec,
    oracle: &'a dyn FeasibilityOracle,
    evaluated: HashMap<Vec<[StoneId; NUM_FEET]>, i8>,
    plans: Vec<ContactPlan>,
    verdicts: Vec<PlanVerdict>,
}

impl Recorder<'_> {
    fn evaluate(&mut self, actions: Vec<ActionSpec>, iteration: u64, stats: &mut SearchStats) -> Result<i8> {
        let key: Vec<[StoneId; NUM_FEET]> = actions.iter().map(|a| a.target_stone_ids).collect();
        if let Some(&w) = self.evaluated.get(&key) {
            return Ok(w);
        }
        stats.oracle_calls += 1;
        let verdict = feasibility::check_plan(self.oracle, self.map, self.start, &actions, self.gait)?;
        let w = verdict.w;
        self.evaluated.insert(key, w);
        if verdict.feasible() {
            stats.iterations_to_first.get_or_insert(iteration);
            self.plans.push(ContactPlan::new(self.map, self.start, actions)?);
            self.verdicts.push(verdict);
        }
        Ok(w)
    }
}
