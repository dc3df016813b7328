//! Interactive replanning sessions.
//!
//! An [`Endpoint`] is one protocol connection: it takes client messages,
//! drives at most one [`Session`] and answers with server events. Every
//! message is handled to completion, replanning included, before the next
//! one; a search may be cut short through the cancel flag handed to
//! [`Endpoint::handle_with`].

use std::io::{BufRead, Write};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::feasibility::{BuiltinOracle, FeasibilityOracle, GaitKind, GaitSpec, OracleParams, PlanVerdict};
use crate::kinematics::{self, ActionSpec, KinematicParams, Stance};
use crate::rng;
use crate::search::{self, ContactPlan, PlannerConfig, SearchControl, SearchParams};
use crate::terrain::{self, GoalSampleParams, GoalSpec, StoneId, TerrainDocument, TerrainGenParams, TerrainMap};
use crate::{Error, Result, NUM_FEET};

pub const PROTOCOL_VERSION: u32 = 1;

pub const CAPABILITIES: [&str; 4] = ["replan", "auto", "adversary", "replay"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionParams {
    pub terrain: TerrainGenParams,
    pub goals: GoalSampleParams,
    pub gait: GaitSpec,
    pub search: SearchParams,
    pub kinematics: KinematicParams,
    pub oracle: OracleParams,
    /// Per-replan time budget. A search that hits it returns what it has.
    pub replan_deadline_ms: Option<f64>,
    /// Stones taken from the current plan before every step; 0 disables
    /// the adversary.
    pub adversary_k: usize,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            terrain: TerrainGenParams::default(),
            goals: GoalSampleParams::default(),
            gait: GaitSpec::jump(),
            search: SearchParams::default(),
            kinematics: KinematicParams::default(),
            oracle: OracleParams::default(),
            replan_deadline_ms: Some(1000.0),
            adversary_k: 0,
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        self.gait.validate()?;
        self.search.validate()?;
        self.kinematics.validate()?;
        self.oracle.validate()?;
        if self.replan_deadline_ms.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::Config("replan_deadline_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(flatten)]
    pub body: ClientBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientBody {
    Hello {
        version: u32,
    },
    CreateSession {
        seed: u64,
        #[serde(default)]
        params: Option<SessionParams>,
    },
    /// Explicit stones, a point the base should stand over, or neither for
    /// a sampled goal.
    SetGoal {
        #[serde(default)]
        stone_ids: Option<[StoneId; NUM_FEET]>,
        #[serde(default)]
        point: Option<[f64; 2]>,
    },
    RemoveStone {
        id: StoneId,
    },
    RestoreStone {
        id: StoneId,
    },
    Step,
    Auto {
        on: bool,
    },
    GetState,
}

impl ClientBody {
    /// Messages that trigger a replan and so supersede an in-flight search.
    pub fn replans(&self) -> bool {
        matches!(
            self,
            ClientBody::CreateSession { .. } | ClientBody::SetGoal { .. } | ClientBody::RemoveStone { .. } | ClientBody::RestoreStone { .. } | ClientBody::Step
        )
    }
}

impl ClientMessage {
    pub fn new(seq: u64, body: ClientBody) -> Self {
        Self { seq: Some(seq), body }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Searching,
    Stepping,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerEvent {
    pub revision: u64,
    /// Sequence number of the client message being answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: u64,
    pub status: SessionStatus,
    pub auto: bool,
    pub gait: GaitKind,
    pub cycle_period: f64,
    pub stance: Stance,
    pub goal: Option<GoalSpec>,
    pub plan: Option<Vec<[StoneId; NUM_FEET]>>,
    pub history: Vec<[StoneId; NUM_FEET]>,
    pub terrain: TerrainDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    Welcome { version: u32, capabilities: Vec<String> },
    State(Box<StateView>),
    Plan { actions: Vec<[StoneId; NUM_FEET]>, iterations: u64, iterations_to_first: Option<u64>, oracle_calls: u64 },
    SearchProgress { iterations: u64, oracle_calls: u64, cancelled: bool },
    StepResult { action: [StoneId; NUM_FEET], executed: bool, stance: [StoneId; NUM_FEET], finished: bool, verdict: PlanVerdict },
    PlanUnavailable { reason: String },
    Stranded { stone_id: StoneId, foot: usize },
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    VersionMismatch,
    HandshakeRequired,
    StaleSeq,
    NoSession,
    NoGoal,
    InvalidGoal,
    UnknownStone,
    InvalidParams,
    SessionOver,
    Internal,
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Welcome { .. } => "welcome",
            EventBody::State(_) => "state",
            EventBody::Plan { .. } => "plan",
            EventBody::SearchProgress { .. } => "search_progress",
            EventBody::StepResult { .. } => "step_result",
            EventBody::PlanUnavailable { .. } => "plan_unavailable",
            EventBody::Stranded { .. } => "stranded",
            EventBody::Error { .. } => "error",
        }
    }
}

fn error(code: ErrorCode, message: impl Into<String>) -> EventBody {
    EventBody::Error { code, message: message.into() }
}

fn ids_of(actions: &[ActionSpec]) -> Vec<[StoneId; NUM_FEET]> {
    actions.iter().map(|a| a.target_stone_ids).collect()
}

/// One robot on one terrain.
pub struct Session {
    pub id: u64,
    pub seed: u64,
    pub params: SessionParams,
    pub map: TerrainMap,
    pub stance: Stance,
    pub goal: Option<GoalSpec>,
    pub status: SessionStatus,
    pub auto: bool,
    pub history: Vec<ActionSpec>,
    pub plan: Option<ContactPlan>,
    oracle: Arc<dyn FeasibilityOracle>,
    replans: u64,
    goals_sampled: u64,
}

impl Session {
    pub fn new(id: u64, seed: u64, params: SessionParams, terrain: Option<TerrainMap>, oracle: Option<Arc<dyn FeasibilityOracle>>) -> Result<Self> {
        params.validate()?;
        let map = match terrain {
            Some(m) => m,
            None => {
                let mut tp = params.terrain.clone();
                tp.protected_ids.extend(tp.start_ids());
                terrain::generate_terrain(&tp, seed)?
            }
        };
        let stance = terrain::start_stance(&map)?;
        let oracle = oracle.unwrap_or_else(|| Arc::new(BuiltinOracle::new(params.oracle.clone())));
        Ok(Self {
            id,
            seed,
            params,
            map,
            stance,
            goal: None,
            status: SessionStatus::Idle,
            auto: false,
            history: Vec::new(),
            plan: None,
            oracle,
            replans: 0,
            goals_sampled: 0,
        })
    }

    pub fn view(&self) -> StateView {
        StateView {
            session_id: self.id,
            status: self.status,
            auto: self.auto,
            gait: self.params.gait.name,
            cycle_period: self.params.gait.cycle_period,
            stance: self.stance.clone(),
            goal: self.goal.clone(),
            plan: self.plan.as_ref().map(|p| ids_of(&p.actions)),
            history: ids_of(&self.history),
            terrain: self.map.to_document(),
        }
    }

    fn over(&self) -> bool {
        matches!(self.status, SessionStatus::Finished | SessionStatus::Failed)
    }

    fn at_goal(&self) -> bool {
        self.goal.as_ref().is_some_and(|g| self.stance.is_on(&g.stone_ids))
    }

    fn set_goal(&mut self, stone_ids: Option<[StoneId; NUM_FEET]>, point: Option<[f64; 2]>) -> Result<()> {
        let goal = match (stone_ids, point) {
            (Some(ids), None) => GoalSpec::from_stones(&self.map, ids)?,
            (None, Some(p)) => terrain::goal_at_point(&self.map, &self.stance, p, &self.params.kinematics)?,
            (None, None) => {
                let seed = rng::derive_seed(self.seed, rng::TAG_GOAL, self.goals_sampled);
                self.goals_sampled += 1;
                terrain::sample_goal(&self.map, &self.stance, &self.params.goals, &self.params.kinematics, seed)?
            }
            (Some(_), Some(_)) => return Err(Error::Config("give stone_ids or point, not both".into())),
        };
        let as_stance = Stance { foot_stone_ids: goal.stone_ids, foot_points: goal.points };
        if let Err(r) = kinematics::check_stance(&as_stance, &self.params.kinematics) {
            return Err(Error::Config(format!("goal is not a valid stance: {r:?}")));
        }
        self.goal = Some(goal);
        self.plan = None;
        if self.status == SessionStatus::Finished {
            self.status = SessionStatus::Idle;
        }
        Ok(())
    }

    /// Plans from the current stance to the goal and stores the first plan.
    fn replan(&mut self, cancel: Option<&Arc<AtomicBool>>, out: &mut Vec<EventBody>) {
        self.plan = None;
        let Some(goal) = self.goal.clone() else { return };
        if self.over() {
            return;
        }
        if let Some(&id) = goal.stone_ids.iter().find(|&&id| !self.map.is_alive(id)) {
            out.push(EventBody::PlanUnavailable { reason: format!("goal stone {id} is removed") });
            return;
        }
        let config = PlannerConfig {
            search: SearchParams { seed: rng::derive_seed(self.seed, rng::TAG_SEARCH, self.replans), ..self.params.search.clone() },
            kinematics: self.params.kinematics.clone(),
            gait: self.params.gait.clone(),
        };
        self.replans += 1;
        let control = SearchControl { cancel: cancel.cloned(), deadline_ms: self.params.replan_deadline_ms };
        let previous = self.status;
        self.status = SessionStatus::Searching;
        let result = search::plan_with_control(&self.map, &self.stance, &goal, &config, self.oracle.as_ref(), &control);
        self.status = previous;
        match result {
            Ok(r) => {
                out.push(EventBody::SearchProgress { iterations: r.stats.iterations, oracle_calls: r.stats.oracle_calls, cancelled: r.stats.cancelled });
                let superseded = r.stats.cancelled && cancel.is_some_and(|c| c.load(std::sync::atomic::Ordering::Relaxed));
                match r.plans.into_iter().next() {
                    Some(p) => {
                        out.push(EventBody::Plan {
                            actions: ids_of(&p.actions),
                            iterations: r.stats.iterations,
                            iterations_to_first: r.stats.iterations_to_first,
                            oracle_calls: r.stats.oracle_calls,
                        });
                        self.plan = Some(p);
                    }
                    // A newer message will replan; staying quiet avoids a
                    // spurious unavailability report.
                    None if superseded => {}
                    None => out.push(EventBody::PlanUnavailable { reason: "no feasible plan found".into() }),
                }
            }
            Err(Error::DeadRoot) => out.push(EventBody::PlanUnavailable { reason: "no legal action from the current stance".into() }),
            Err(e) => out.push(EventBody::PlanUnavailable { reason: e.to_string() }),
        }
    }

    /// Removes up to `k` stones drawn from the future footholds of the
    /// current plan, never the stones under the feet or the goal stones.
    fn adversary(&mut self) -> Vec<StoneId> {
        let k = self.params.adversary_k;
        let (Some(plan), Some(goal)) = (&self.plan, &self.goal) else { return vec![] };
        let mut candidates: Vec<StoneId> = plan.stones().filter(|id| !self.stance.foot_stone_ids.contains(id) && !goal.stone_ids.contains(id)).collect();
        candidates.sort_unstable();
        candidates.dedup();
        let mut rng = rng::stream(self.seed, rng::TAG_ADVERSARY, self.history.len() as u64);
        let mut chosen: Vec<StoneId> = candidates.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_unstable();
        for &id in &chosen {
            self.map.remove_stone(id).expect("candidate stones exist");
        }
        chosen
    }

    fn step(&mut self, cancel: Option<&Arc<AtomicBool>>, out: &mut Vec<EventBody>) {
        if self.over() {
            out.push(error(ErrorCode::SessionOver, format!("session is {:?}", self.status).to_lowercase()));
            return;
        }
        if self.goal.is_none() {
            out.push(error(ErrorCode::NoGoal, "set a goal first"));
            return;
        }
        if self.params.adversary_k > 0 && !self.adversary().is_empty() {
            out.push(EventBody::State(Box::new(self.view())));
            self.replan(cancel, out);
        }
        // A superseded search leaves no plan behind; the step searches first.
        if self.plan.is_none() {
            let before = out.len();
            self.replan(cancel, out);
            if self.plan.is_none() && !out[before..].iter().any(|e| matches!(e, EventBody::PlanUnavailable { .. })) {
                out.push(EventBody::PlanUnavailable { reason: "no feasible plan for the current stance".into() });
            }
        }
        let Some(plan) = &self.plan else { return };
        let Some(action) = plan.actions.first().cloned() else {
            out.push(EventBody::PlanUnavailable { reason: "plan is empty".into() });
            return;
        };
        if let Some(&id) = action.target_stone_ids.iter().find(|&&id| !self.map.is_alive(id)) {
            self.plan = None;
            out.push(EventBody::PlanUnavailable { reason: format!("planned stone {id} is removed") });
            return;
        }
        self.status = SessionStatus::Stepping;
        let post = match self.stance.apply(&self.map, &action) {
            Ok(p) => p,
            Err(e) => {
                self.status = SessionStatus::Idle;
                out.push(EventBody::PlanUnavailable { reason: e.to_string() });
                return;
            }
        };
        let verdict = match self.oracle.evaluate(&self.map, &[self.stance.clone(), post.clone()], &self.params.gait) {
            Ok(v) => v,
            Err(e) => {
                self.status = SessionStatus::Idle;
                out.push(EventBody::PlanUnavailable { reason: e.to_string() });
                return;
            }
        };
        let executed = verdict.feasible();
        if executed {
            self.stance = post;
            self.history.push(action.clone());
        }
        let finished = self.at_goal();
        self.status = if finished { SessionStatus::Finished } else { SessionStatus::Idle };
        out.push(EventBody::StepResult { action: action.target_stone_ids, executed, stance: self.stance.foot_stone_ids, finished, verdict });
        if finished {
            self.plan = None;
        } else {
            self.replan(cancel, out);
        }
    }

    fn remove(&mut self, id: StoneId, cancel: Option<&Arc<AtomicBool>>, out: &mut Vec<EventBody>) -> Result<()> {
        self.map.remove_stone(id)?;
        out.push(EventBody::State(Box::new(self.view())));
        if let Some(foot) = self.stance.foot_stone_ids.iter().position(|&s| s == id) {
            self.status = SessionStatus::Failed;
            self.plan = None;
            out.push(EventBody::Stranded { stone_id: id, foot });
            return Ok(());
        }
        self.replan(cancel, out);
        Ok(())
    }

    fn restore(&mut self, id: StoneId, cancel: Option<&Arc<AtomicBool>>, out: &mut Vec<EventBody>) -> Result<()> {
        self.map.restore_stone(id)?;
        if self.status == SessionStatus::Failed && self.stance.foot_stone_ids.iter().all(|&s| self.map.is_alive(s)) {
            self.status = SessionStatus::Idle;
        }
        out.push(EventBody::State(Box::new(self.view())));
        self.replan(cancel, out);
        Ok(())
    }
}

#[derive(Default, Clone)]
pub struct EndpointConfig {
    /// Used instead of generating terrain from the session seed.
    pub terrain: Option<TerrainMap>,
    /// Replaces the built-in oracle.
    pub oracle: Option<Arc<dyn FeasibilityOracle>>,
    /// Params for `create_session` messages that carry none.
    pub defaults: SessionParams,
}

/// One protocol connection.
pub struct Endpoint {
    config: EndpointConfig,
    greeted: bool,
    last_seq: Option<u64>,
    revision: u64,
    sessions_created: u64,
    pub session: Option<Session>,
}

impl Endpoint {
    pub fn new(config: EndpointConfig) -> Self {
        Self { config, greeted: false, last_seq: None, revision: 0, sessions_created: 0, session: None }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Whether the connection was refused at the handshake.
    pub fn greeted(&self) -> bool {
        self.greeted
    }

    /// Auto-stepping period in seconds, when auto mode is on.
    pub fn auto_period(&self) -> Option<f64> {
        self.session.as_ref().filter(|s| s.auto && !s.over()).map(|s| s.params.gait.cycle_period)
    }

    fn stamp(&mut self, seq: Option<u64>, bodies: Vec<EventBody>) -> Vec<ServerEvent> {
        bodies
            .into_iter()
            .map(|body| {
                self.revision += 1;
                ServerEvent { revision: self.revision, seq, body }
            })
            .collect()
    }

    /// Parses one line; malformed frames become an error event.
    pub fn handle_line(&mut self, line: &str, cancel: Option<&Arc<AtomicBool>>) -> Vec<ServerEvent> {
        match serde_json::from_str::<ClientMessage>(line) {
            Ok(msg) => self.handle_with(msg, cancel),
            Err(e) => {
                let seq = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v.get("seq")?.as_u64());
                self.stamp(seq, vec![error(ErrorCode::Malformed, e.to_string())])
            }
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerEvent> {
        self.handle_with(msg, None)
    }

    pub fn handle_with(&mut self, msg: ClientMessage, cancel: Option<&Arc<AtomicBool>>) -> Vec<ServerEvent> {
        let seq = msg.seq;
        let bodies = self.dispatch(msg, cancel);
        self.stamp(seq, bodies)
    }

    fn dispatch(&mut self, msg: ClientMessage, cancel: Option<&Arc<AtomicBool>>) -> Vec<EventBody> {
        if let Some(seq) = msg.seq {
            if self.last_seq.is_some_and(|last| seq <= last) {
                return vec![error(ErrorCode::StaleSeq, format!("seq {seq} does not increase"))];
            }
            self.last_seq = Some(seq);
        }
        if let ClientBody::Hello { version } = msg.body {
            if version != PROTOCOL_VERSION {
                self.greeted = false;
                return vec![error(ErrorCode::VersionMismatch, format!("server speaks version {PROTOCOL_VERSION}, client sent {version}"))];
            }
            self.greeted = true;
            return vec![EventBody::Welcome { version: PROTOCOL_VERSION, capabilities: CAPABILITIES.iter().map(|c| c.to_string()).collect() }];
        }
        if !self.greeted {
            return vec![error(ErrorCode::HandshakeRequired, "send hello first")];
        }
        if let ClientBody::CreateSession { seed, params } = msg.body {
            let params = params.unwrap_or_else(|| self.config.defaults.clone());
            self.sessions_created += 1;
            return match Session::new(self.sessions_created, seed, params, self.config.terrain.clone(), self.config.oracle.clone()) {
                Ok(s) => {
                    let view = s.view();
                    self.session = Some(s);
                    vec![EventBody::State(Box::new(view))]
                }
                Err(e) => vec![error(ErrorCode::InvalidParams, e.to_string())],
            };
        }
        let Some(session) = self.session.as_mut() else {
            return vec![error(ErrorCode::NoSession, "create a session first")];
        };
        let mut out = Vec::new();
        match msg.body {
            ClientBody::Hello { .. } | ClientBody::CreateSession { .. } => unreachable!("handled above"),
            ClientBody::GetState => out.push(EventBody::State(Box::new(session.view()))),
            ClientBody::Auto { on } => {
                session.auto = on;
                out.push(EventBody::State(Box::new(session.view())));
            }
            ClientBody::SetGoal { stone_ids, point } => match session.set_goal(stone_ids, point) {
                Ok(()) => {
                    out.push(EventBody::State(Box::new(session.view())));
                    if session.at_goal() {
                        session.status = SessionStatus::Finished;
                    } else {
                        session.replan(cancel, &mut out);
                    }
                }
                Err(e) => out.push(error(ErrorCode::InvalidGoal, e.to_string())),
            },
            ClientBody::RemoveStone { id } => {
                if let Err(e) = session.remove(id, cancel, &mut out) {
                    out.push(error(ErrorCode::UnknownStone, e.to_string()));
                }
            }
            ClientBody::RestoreStone { id } => {
                if let Err(e) = session.restore(id, cancel, &mut out) {
                    out.push(error(ErrorCode::UnknownStone, e.to_string()));
                }
            }
            ClientBody::Step => session.step(cancel, &mut out),
        }
        out
    }

    /// A timer-driven step in auto mode.
    pub fn tick(&mut self, cancel: Option<&Arc<AtomicBool>>) -> Vec<ServerEvent> {
        let mut out = Vec::new();
        if let Some(s) = self.session.as_mut() {
            s.step(cancel, &mut out);
        }
        self.stamp(None, out)
    }
}

/// One recorded client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    /// Milliseconds since the connection opened.
    pub t_ms: f64,
    pub message: ClientMessage,
}

pub fn read_replay<R: BufRead>(input: R) -> Result<Vec<ReplayEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<ServerEvent>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Feeds recorded messages through a fresh endpoint, ignoring timing.
pub fn replay(entries: &[ReplayEntry], config: EndpointConfig) -> Vec<ServerEvent> {
    let mut ep = Endpoint::new(config);
    entries.iter().flat_map(|e| ep.handle(e.message.clone())).collect()
}
